"""Command line pipeline: ``nuc synth | stats | train | score | eval | ksweep``.

Datasets are referred to by path prefix: ``PREFIX`` means ``PREFIX.vec`` +
``PREFIX.csv`` (+ ``PREFIX.logits.vec`` when present). Every run writes a JSON
manifest next to its output. Exit codes: 1 usage, 2 data, 3 numeric.
"""

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import baselines as bl
from . import nuc_model as nm
from ._io import atomic_open, sha256_file
from .exceptions import DataError, FormatError, NucDataError, NucNumericError
from .knn_index import DistanceKernel, build_index
from .metrics import evaluate_task, format_table, write_report_csv
from .neigh_stats import stats_sweep, write_sweep_csv
from .repr_store import correctness_labels, dataset_paths, load_dataset, save_dataset
from .synth import SynthConfig, generate, split

log = logging.getLogger("nuc")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
METHODS = ("nuc", "softmax", "softmax-cal", "kde1", "kde2", "kde3", "mahalanobis")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- helpers -------------------------------------------------------------------

class _Run:
    """Tracks inputs read by a subcommand and writes its manifest."""

    def __init__(self, args):
        self.args = args
        self.inputs = {}
        self.t0 = time.perf_counter()

    def dataset(self, prefix):
        vec, meta, logits = dataset_paths(prefix)
        for p in (vec, meta):
            if not p.exists():
                raise DataError(f"missing file: {p}")
        rs = load_dataset(prefix)
        for p in (vec, meta, logits):
            if p.exists():
                self.inputs[str(p)] = sha256_file(p)
        return rs

    def file(self, path):
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing file: {path}")
        self.inputs[str(path)] = sha256_file(path)
        return path

    def finish(self, manifest_path, outputs):
        params = {k: v for k, v in vars(self.args).items() if k != "func"}
        manifest = {
            "subcommand": self.args.command,
            "parameters": params,
            "inputs": self.inputs,
            "outputs": [str(p) for p in outputs],
            "seed": params.get("seed"),
            "version": __version__,
            "duration_s": round(time.perf_counter() - self.t0, 6),
        }
        with atomic_open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, default=str)
            fh.write("\n")


def _manifest_for(path):
    return Path(str(path) + ".manifest.json")


def _k_list(text):
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}")
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("k values must be positive")
    return ks


def _named(text):
    name, sep, path = text.partition("=")
    if not sep:
        return Path(text).stem, Path(text)
    return name, Path(path)


def write_scores(path, ids, scores):
    with atomic_open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "score"))
        for i, s in zip(np.asarray(ids).tolist(), np.asarray(scores, dtype=np.float64).tolist()):
            w.writerow((i, repr(s)))


def read_scores(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "score"]:
            raise FormatError(f"{path}: header must be id,score")
        out = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out[int(row[0])] = float(row[1])
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return out


def _align(scores, ids, path):
    missing = [i for i in ids.tolist() if i not in scores]
    if missing:
        raise DataError(f"{path}: no score for ids {missing[:5]}{'...' if len(missing) > 5 else ''}")
    return np.array([scores[i] for i in ids.tolist()])


# --- subcommands -----------------------------------------------------------------

def cmd_synth(args, run):
    values = {}
    if args.config:
        values = vars(SynthConfig.from_file(run.file(args.config)))
    for key in ("n_classes", "dim", "n_train_per_class", "n_test_per_class", "separation",
                "overlap", "overlap_scale", "n_ood_clusters", "n_ood_per_cluster", "ood_offset"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    values["seed"] = args.seed
    try:
        cfg = SynthConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    args.resolved_config = vars(cfg)
    data = generate(cfg)
    out = Path(args.out)
    written = []
    for name, rs in (("train", data.train), ("test_in", data.test_in), ("test_ood", data.test_ood)):
        if rs is not None:
            written += save_dataset(out / name, rs)
    run.finish(out / "manifest.json", written)
    log.info("wrote %d files to %s", len(written), out)


def cmd_stats(args, run):
    index_set = run.dataset(args.index_data)
    query_set = run.dataset(args.query_data) if args.query_data else index_set
    index = build_index(index_set, args.kernel)
    rows = stats_sweep(query_set, index, args.k_list, self_exclude=args.self_exclude)
    write_sweep_csv(args.out, rows)
    run.finish(_manifest_for(args.out), [args.out])


def _train_config(args, **over):
    return nm.TrainConfig(k=args.k, learning_rate=args.lr, annealed_learning_rate=args.lr_annealed,
                          anneal_step=args.anneal_step, epochs=args.epochs, seed=args.seed,
                          batch_size=args.batch, hidden_width=args.hidden_width,
                          n_layers=args.layers, kernel=args.kernel, **over)


def cmd_train(args, run):
    train_set = run.dataset(args.data)
    try:
        cfg = _train_config(args, use_confidence=not args.no_confidence)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    index = build_index(train_set, args.kernel)
    net = nm.train(train_set, index, cfg)
    nm.save_checkpoint(args.out, net)
    log.info("epoch losses: %s", ", ".join(f"{v:.4f}" for v in net.history))
    run.finish(_manifest_for(args.out), [args.out])


def _calibrated_scores(args, run, data):
    if args.calib_data:
        calib = run.dataset(args.calib_data)
        model = bl.fit_temperature(calib.logits, calib.labels)
        return bl.calibrated_softmax_score(model, data)
    if data.logits is None:
        raise DataError("softmax-cal needs logits (PREFIX.logits.vec)")
    # cross-fit: each half is scored with the temperature fitted on the other half
    halves = split(data, [0.5, 0.5], seed=args.seed)
    pos = {int(i): p for p, i in enumerate(data.ids)}
    scores = np.empty(data.count)
    for fit_half, score_half in ((halves[0], halves[1]), (halves[1], halves[0])):
        model = bl.fit_temperature(fit_half.logits, fit_half.labels)
        rows = [pos[int(i)] for i in score_half.ids]
        scores[rows] = bl.calibrated_softmax_score(model, score_half)
    return scores


def cmd_score(args, run):
    data = run.dataset(args.data)
    method = args.method
    needs_index = method in ("nuc", "kde1", "kde2", "kde3", "mahalanobis")
    if needs_index and not args.index_data:
        raise UsageError(f"--method {method} requires --index-data")
    if method == "nuc":
        if not args.checkpoint:
            raise UsageError("--method nuc requires --checkpoint")
        net = nm.load_checkpoint(run.file(args.checkpoint))
        index = build_index(run.dataset(args.index_data), net.kernel)
        scores = nm.score(net, index, data)
    elif method == "softmax":
        scores = bl.softmax_score(data)
    elif method == "softmax-cal":
        scores = _calibrated_scores(args, run, data)
    elif method == "mahalanobis":
        model = bl.fit_mahalanobis(run.dataset(args.index_data))
        scores = bl.mahalanobis_score(model, data)
    else:
        index = build_index(run.dataset(args.index_data), args.kernel)
        scores = bl.kde_baseline_scores(index, data, method, k=args.k)
    write_scores(args.out, data.ids, scores)
    run.finish(_manifest_for(args.out), [args.out])


def cmd_eval(args, run):
    data = run.dataset(args.data)
    reports = []
    if args.task == "misclassification":
        errors = 1 - correctness_labels(data)
        for name, path in args.scores:
            s = _align(read_scores(run.file(path)), data.ids, path)
            reports.append(evaluate_task(s, errors, name, args.task))
    else:
        if not args.ood_data or not args.ood_scores:
            raise UsageError("--task ood requires --ood-data and --ood-scores")
        ood = run.dataset(args.ood_data)
        keep = np.ones(data.count, bool) if args.include_misclassified \
            else correctness_labels(data).astype(bool)
        ood_by_name = dict(args.ood_scores)
        for name, path in args.scores:
            if name not in ood_by_name:
                raise UsageError(f"no --ood-scores entry named {name!r}")
            s_in = _align(read_scores(run.file(path)), data.ids, path)[keep]
            s_out = _align(read_scores(run.file(ood_by_name[name])), ood.ids, ood_by_name[name])
            labels = np.r_[np.zeros(len(s_in), int), np.ones(len(s_out), int)]
            reports.append(evaluate_task(np.r_[s_in, s_out], labels, name, args.task))
    write_report_csv(args.out, reports)
    print(format_table(reports))
    run.finish(_manifest_for(args.out), [args.out])


def cmd_ksweep(args, run):
    train_set = run.dataset(args.train_data)
    test_set = run.dataset(args.test_data)
    index = build_index(train_set, args.kernel)
    try:
        cfg = _train_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows = nm.k_sweep(train_set, test_set, index, args.k_list, cfg)
    with atomic_open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=("k", "auroc_with_conf", "auroc_without_conf"),
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({"k": r["k"], "auroc_with_conf": repr(r["auroc_with_conf"]),
                        "auroc_without_conf": repr(r["auroc_without_conf"])})
    run.finish(_manifest_for(args.out), [args.out])


# --- parser ----------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--k", type=int, default=10, help="neighbors per point (default 10)")
    p.add_argument("--lr", type=float, default=1e-3, help="initial learning rate")
    p.add_argument("--lr-annealed", type=float, default=1e-4, help="learning rate after annealing")
    p.add_argument("--anneal-step", type=int, default=40000, help="optimizer step at which to anneal")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--hidden-width", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)


def build_parser():
    parser = _Parser(prog="nuc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"nuc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add_parser = sub.add_parser

    def add_parser(name, **kw):
        p = _add_parser(name, **kw)
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        return p

    sub.add_parser = add_parser

    def common(p, kernel=True):
        p.add_argument("--seed", type=int, default=0)
        if kernel:
            p.add_argument("--kernel", type=lambda v: DistanceKernel.parse(v).value, default="euclidean",
                           help="euclidean (default) or cosine_distance")

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key=value config file")
    for flag, typ in (("n-classes", int), ("dim", int), ("n-train-per-class", int),
                      ("n-test-per-class", int), ("separation", float), ("overlap", float),
                      ("overlap-scale", float), ("n-ood-clusters", int),
                      ("n-ood-per-cluster", int), ("ood-offset", float)):
        p.add_argument(f"--{flag}", type=typ)
    common(p, kernel=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="neighborhood statistics per k, split by correctness")
    p.add_argument("--index-data", required=True)
    p.add_argument("--query-data", help="defaults to the index data")
    p.add_argument("--k-list", type=_k_list, default=[1, 2, 5, 10, 50, 100, 200])
    p.add_argument("--self-exclude", action="store_true",
                   help="drop each query's own entry (queries are index members)")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train the neighborhood error classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint JSON path")
    p.add_argument("--no-confidence", action="store_true", help="omit the upstream confidence input")
    _add_train_flags(p)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="write per-point uncertainty scores")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--data", required=True, help="points to score")
    p.add_argument("--index-data", help="training set (nuc, kde*, mahalanobis)")
    p.add_argument("--checkpoint", help="trained network (nuc)")
    p.add_argument("--calib-data", help="held-out set with logits (softmax-cal)")
    p.add_argument("--k", type=int, default=200, help="neighbors for kde* (default 200)")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="AUROC / AUPR-Out / AUPR-In report")
    p.add_argument("--task", choices=("misclassification", "ood"), default="misclassification")
    p.add_argument("--data", required=True, help="in-distribution points")
    p.add_argument("--scores", type=_named, action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--ood-data")
    p.add_argument("--ood-scores", type=_named, action="append", metavar="NAME=PATH")
    p.add_argument("--include-misclassified", action="store_true",
                   help="pool misclassified in-distribution points into the in-set")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ksweep", help="AUROC vs k with and without the confidence input")
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--k-list", type=_k_list, default=[1, 2, 5, 10, 50, 100, 200])
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    common(p)
    p.set_defaults(func=cmd_ksweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args, _Run(args))
    except UsageError as exc:
        print(f"nuc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NucDataError, FileNotFoundError, KeyError) as exc:
        print(f"nuc {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NucNumericError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"nuc {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
