"""Command-line entry point.

    wgat synth --out data/
    wgat preprocess --input data/ratings.dat --format movielens --out cache/
    wgat train --cache cache/ --epochs 20 --out run/
    wgat evaluate --checkpoint run/checkpoint.bin --cache cache/ --per-user --out run/
    wgat analyze --checkpoint run/checkpoint.bin --cache cache/ --report o1 --markdown
    wgat gradcheck
    wgat stability --cache cache/ --batch-sizes 512 --arms w2,kl --out stab/

Exit codes: 0 success, 1 numerical or check failure, 2 usage or IO error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from contextlib import contextmanager

import numpy as np

from . import __version__
from ._io import atomic_write_text
from .data_io import (DataError, manifest_checksum, parse_categories, parse_delimited,
                      parse_movielens, preprocess, read_cache, write_cache)
from .encoder import VARIANCE_RULES
from .evaluator import evaluate_all, popularity_baseline, rank_all
from .graph import build_graph
from .losses import LOSS_MODES
from .trainer import (ENCODERS, TrainConfig, TrainingDiverged, final_embeddings,
                      gradient_check, load_checkpoint, save_checkpoint, train,
                      write_epoch_log)
from .uncertainty import (StabilityRun, activity_correlation, group_by_o1, group_by_o2,
                          stability_report, variance_by_label_count)

log = logging.getLogger("wgat")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
ARM_LOSS = {"w2": "bpr+wpc", "kl": "bpr+kl_contrastive"}


class UsageError(Exception):
    pass


class RunManifest:
    """Resolved settings and per-phase wall-clock timings of one command."""

    def __init__(self, command: str, argv):
        self.data = {
            "command": command,
            "argv": list(argv),
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "config": None,
            "cache_sha256": None,
            "timings": {},
        }

    @contextmanager
    def phase(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.data["timings"][name] = round(time.perf_counter() - start, 6)

    def write(self, directory) -> str:
        path = os.path.join(directory, "run_manifest.json")
        atomic_write_text(path, json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        return path


# --------------------------------------------------------------------------
# helpers


def _positive_csv_ints(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def _arms(text: str) -> list[str]:
    arms = [x.strip() for x in text.split(",") if x.strip()]
    bad = [a for a in arms if a not in ARM_LOSS]
    if bad or not arms:
        raise argparse.ArgumentTypeError(f"arms must be drawn from {sorted(ARM_LOSS)}")
    return arms


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--dim", type=int, default=d.dim, help="embedding dimension")
    p.add_argument("--layers", type=int, default=d.layers, help="propagation layers")
    p.add_argument("--lr", type=float, default=d.lr, help="Adam learning rate")
    p.add_argument("--reg", type=float, default=d.reg, help="L2 strength on layer-0 tables")
    p.add_argument("--tau", type=float, default=d.tau, help="contrastive temperature")
    p.add_argument("--omega", type=float, default=d.omega, help="contrastive loss weight")
    p.add_argument("--encoder", choices=ENCODERS, default=d.encoder)
    p.add_argument("--variance-rule", choices=VARIANCE_RULES, default=d.variance_rule)
    p.add_argument("--seed", type=int, default=d.seed)


def _config(args, **override) -> TrainConfig:
    fields = dict(dim=args.dim, layers=args.layers, lr=args.lr, reg=args.reg, tau=args.tau,
                  omega=args.omega, encoder=args.encoder, variance_rule=args.variance_rule,
                  seed=args.seed)
    for name in ("batch", "epochs", "loss", "eval_every", "topk"):
        if hasattr(args, name):
            fields["batch_size" if name == "batch" else name] = getattr(args, name)
    fields.update(override)
    try:
        return TrainConfig(**fields)
    except ValueError as exc:
        raise UsageError(str(exc))


def _require_dir(path, what: str) -> None:
    if not os.path.isdir(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def _load_model(args):
    """(bundle, graph, params, config) from --cache and --checkpoint."""
    _require_dir(args.cache, "cache directory")
    if not os.path.isfile(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    bundle = read_cache(args.cache)
    params, config, nu, ni = load_checkpoint(args.checkpoint)
    if (nu, ni) != (bundle.num_users, bundle.num_items):
        raise DataError(f"checkpoint is for {nu} users / {ni} items but the cache has "
                        f"{bundle.num_users} / {bundle.num_items}")
    graph = build_graph(bundle.train, nu, ni)
    return bundle, graph, params, config


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, manifest: RunManifest) -> int:
    from .synthetic import movielens_like

    with manifest.phase("generate"):
        cat = movielens_like(args.users, args.items, interactions=args.interactions,
                             seed=args.seed)
        ratings, movies = cat.write_movielens(args.out)
    print(f"wrote {len(cat.users)} interactions to {ratings} and labels to {movies}")
    manifest.write(args.out)
    return EXIT_OK


def cmd_preprocess(args, manifest: RunManifest) -> int:
    with manifest.phase("parse"):
        if args.format == "movielens":
            raw = parse_movielens(args.input)
        else:
            columns = None
            if args.columns:
                columns = tuple(int(x) for x in args.columns.split(","))
            raw = parse_delimited(args.input, args.delimiter.encode().decode("unicode_escape"),
                                  columns)
    with manifest.phase("preprocess"):
        bundle = preprocess(raw, args.k_core, args.ratio, args.seed, args.threshold)
    with manifest.phase("write"):
        manifest.data["cache_sha256"] = write_cache(bundle, args.out)
    manifest.data["config"] = {"k_core": args.k_core, "ratio": args.ratio, "seed": args.seed,
                               "threshold": args.threshold, "format": args.format}
    print(f"users={bundle.num_users} items={bundle.num_items} "
          f"train={len(bundle.train)} test={len(bundle.test)}")
    manifest.write(args.out)
    return EXIT_OK


def cmd_train(args, manifest: RunManifest) -> int:
    _require_dir(args.cache, "cache directory")
    config = _config(args)
    with manifest.phase("load"):
        bundle = read_cache(args.cache)
        graph = build_graph(bundle.train, bundle.num_users, bundle.num_items)
    manifest.data["config"] = config.to_dict()
    manifest.data["cache_sha256"] = manifest_checksum(args.cache)
    os.makedirs(args.out, exist_ok=True)
    status = EXIT_OK
    with manifest.phase("train"):
        try:
            params, history = train(config, graph, bundle.test if config.eval_every else None)
        except TrainingDiverged as exc:
            log.error("%s", exc)
            manifest.data["error"] = str(exc)
            manifest.write(args.out)
            return EXIT_FAIL
    with manifest.phase("save"):
        save_checkpoint(os.path.join(args.out, "checkpoint.bin"), params, config,
                        bundle.num_users, bundle.num_items)
        write_epoch_log(history, os.path.join(args.out, "epoch_log.csv"))
    final = history[-1].l_total if history else float("nan")
    if history and not np.isfinite(final):
        status = EXIT_FAIL
    print(f"epochs={len(history)} final_loss={final:.6f}")
    manifest.write(args.out)
    return status


def cmd_evaluate(args, manifest: RunManifest) -> int:
    with manifest.phase("load"):
        bundle, graph, params, config = _load_model(args)
    manifest.data["config"] = config.to_dict()
    manifest.data["cache_sha256"] = manifest_checksum(args.cache)
    with manifest.phase("evaluate"):
        if args.scorer == "popularity":
            result = popularity_baseline(graph, bundle.test, args.topk)
        else:
            mean, var = final_embeddings(params, graph, config)
            result = evaluate_all(mean, var, graph, bundle.test, args.topk)
    print(result.summary())
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "metrics.txt"), result.summary() + "\n")
    if args.per_user:
        atomic_write_text(os.path.join(args.out, "per_user.csv"),
                          result.per_user_csv() + f"# {result.summary()}\n")
    manifest.write(args.out)
    return EXIT_OK


def cmd_analyze(args, manifest: RunManifest) -> int:
    if args.report in ("o2", "labels") and not args.categories:
        raise UsageError(f"--report {args.report} needs --categories")
    with manifest.phase("load"):
        bundle, graph, params, config = _load_model(args)
        categories = None
        if args.categories:
            categories = parse_categories(args.categories, bundle.item_ids())
    manifest.data["config"] = config.to_dict()
    manifest.data["cache_sha256"] = manifest_checksum(args.cache)
    with manifest.phase("analyze"):
        mean, var = final_embeddings(params, graph, config)
        nu = graph.num_users
        counts = graph.user_degrees()
        active = np.flatnonzero(counts > 0)
        extra = ""
        if args.report == "o1":
            report = group_by_o1(var[active], counts[active], per_entry_mean=args.per_entry_mean)
            rho = activity_correlation(var[active], counts[active], args.per_entry_mean)
            extra = f"spearman(log10 count, variance) = {rho:.4f}"
        elif args.report == "o2":
            ranking = rank_all(mean, var, graph, args.topk)
            lists = [ranking.top(r) for r in range(len(ranking.users))]
            report = group_by_o2(var[ranking.users], lists, categories,
                                 per_entry_mean=args.per_entry_mean)
        else:
            report = variance_by_label_count(var[nu:], categories, args.per_entry_mean)
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, f"report_{args.report}.csv"), report.to_csv())
    text = report.to_markdown() if args.markdown else report.to_csv()
    if args.markdown:
        atomic_write_text(os.path.join(args.out, f"report_{args.report}.md"), text)
    print(text, end="")
    if extra:
        print(extra)
    manifest.write(args.out)
    return EXIT_OK


def cmd_gradcheck(args, manifest: RunManifest) -> int:
    if not 1e-6 <= args.step <= 1e-4:
        log.warning("step %g is outside [1e-6, 1e-4]; expect %s error to dominate",
                    args.step, "truncation" if args.step > 1e-4 else "round-off")
    config = _config(args, loss=args.loss)
    manifest.data["config"] = config.to_dict()
    with manifest.phase("check"):
        worst = gradient_check(args.users, args.items, args.edges, args.samples, args.seed,
                               args.step, config)
    ok = worst < args.tol
    print(f"max relative error {worst:.3e} over {args.samples} coordinates: "
          f"{'PASS' if ok else 'FAIL'} (tol {args.tol:g})")
    if args.out:
        manifest.write(args.out)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_stability(args, manifest: RunManifest) -> int:
    _require_dir(args.cache, "cache directory")
    with manifest.phase("load"):
        bundle = read_cache(args.cache)
        graph = build_graph(bundle.train, bundle.num_users, bundle.num_items)
    manifest.data["cache_sha256"] = manifest_checksum(args.cache)
    manifest.data["config"] = {"batch_sizes": args.batch_sizes, "arms": args.arms,
                               "epochs": args.epochs, **_config(args).to_dict()}
    os.makedirs(args.out, exist_ok=True)
    runs = []
    for arm in args.arms:
        for batch in args.batch_sizes:
            config = _config(args, loss=ARM_LOSS[arm], batch_size=batch)
            with manifest.phase(f"train_{arm}_{batch}"):
                try:
                    _, history = train(config, graph)
                except TrainingDiverged as exc:
                    log.error("arm %s, batch %d: %s", arm, batch, exc)
                    return EXIT_FAIL
            write_epoch_log(history, os.path.join(args.out, f"epoch_log_{arm}_{batch}.csv"))
            runs.append(StabilityRun(arm, batch, args.seed, [r.l_total for r in history]))
    summary, curves = stability_report(runs)
    atomic_write_text(os.path.join(args.out, "stability_summary.csv"), summary)
    atomic_write_text(os.path.join(args.out, "stability_curves.csv"), curves)
    print(summary, end="")
    manifest.write(args.out)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wgat", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic MovieLens-format dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=943)
    p.add_argument("--items", type=int, default=1682)
    p.add_argument("--interactions", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="parse, k-core filter, split and cache")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("movielens", "delimited"), default="movielens")
    p.add_argument("--delimiter", default="\\t", help="delimited format only")
    p.add_argument("--columns", help="user,item[,rating[,timestamp]] positions")
    p.add_argument("--k-core", type=int, default=5)
    p.add_argument("--ratio", type=float, default=0.8, help="train fraction per user")
    p.add_argument("--threshold", type=float, default=1.0, help="minimum rating kept")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="cache")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train on a cached dataset")
    p.add_argument("--cache", required=True)
    _add_model_flags(p)
    p.add_argument("--batch", type=int, default=TrainConfig.batch_size)
    p.add_argument("--loss", choices=LOSS_MODES, default=TrainConfig.loss)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--eval-every", type=int, default=0, help="evaluate every N epochs")
    p.add_argument("--topk", type=int, default=20)
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Recall@K and NDCG@K on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--topk", type=int, default=20)
    p.add_argument("--per-user", action="store_true", help="write per_user.csv")
    p.add_argument("--scorer", choices=("model", "popularity"), default="model")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="variance and diversity reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--categories", help="item::title::Label1|Label2 file")
    p.add_argument("--report", choices=("o1", "o2", "labels"), default="o1")
    p.add_argument("--markdown", action="store_true")
    p.add_argument("--per-entry-mean", action="store_true",
                   help="summarise variances by their mean entry instead of the L2 norm")
    p.add_argument("--topk", type=int, default=20)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check on a toy graph")
    p.add_argument("--users", type=int, default=5)
    p.add_argument("--items", type=int, default=7)
    p.add_argument("--edges", type=int, default=20)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--loss", choices=LOSS_MODES, default=TrainConfig.loss)
    _add_model_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("stability", help="loss curves per contrastive arm and batch size")
    p.add_argument("--cache", required=True)
    p.add_argument("--batch-sizes", type=_positive_csv_ints, default=[512, 1024, 2048])
    p.add_argument("--arms", type=_arms, default=["w2", "kl"])
    p.add_argument("--epochs", type=int, default=100)
    _add_model_flags(p)
    p.add_argument("--out", default="stability")
    p.set_defaults(func=cmd_stability)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(args.command, argv)
    try:
        return args.func(args, manifest)
    except UsageError as exc:
        print(f"wgat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DataError) as exc:
        print(f"wgat {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"wgat {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_FAIL
