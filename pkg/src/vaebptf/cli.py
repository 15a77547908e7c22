"""Command line: generate, train, evaluate, neighbors, ablate.

Exit codes: 0 success, 2 usage error, 3 data or validation error,
4 internal numerical failure. Tables go to stdout, tab-separated with a
header row.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import load_config, load_grid, split_options
from .engine import ModelConfig, fit, posterior_mean_factors
from .errors import DataError, NumericalError
from .evaluation import (coherence_pmi, cross_validate, evaluate_means, load_incidence,
                         top_k_neighbors)
from .gibbs import gibbs_fit
from .rng import stream
from .synthetic import generate, save_truth
from .tensor_store import check_same_shape, load_tensor, save_tensor, train_test_split

log = logging.getLogger("vaebptf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
DEFAULT_GIBBS_ITERS = 400


class UsageError(Exception):
    pass


def _ints(text):
    try:
        return tuple(int(tok) for tok in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _fraction(text):
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError("must lie strictly between 0 and 1")
    return value


def _default_threads():
    raw = os.environ.get("BPTF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write(path, text):
    try:
        Path(path).write_text(text, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def _table(header, rows):
    lines = ["\t".join(header)]
    lines.extend("\t".join(_cell(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


# ---------------------------------------------------------------- resolution

def _resolve(args):
    """ModelConfig and command options from ``--config`` plus flag overrides."""
    overrides = load_config(args.config) if getattr(args, "config", None) else {}
    model_keys, options = split_options(overrides)
    if getattr(args, "seed", None) is not None:
        model_keys["seed"] = args.seed
    if getattr(args, "k", None) is not None:
        model_keys["K"] = args.k
    if getattr(args, "no_reweight", False):
        model_keys["reweight"] = False
    cfg = ModelConfig().replace(**model_keys)
    model = getattr(args, "model", None) or options.get("model", "vae-bptf")
    if model not in ("vae-bptf", "gibbs-bptf"):
        raise DataError(f"unknown model {model!r}")
    gibbs_iters = options.get("gibbs_iters", DEFAULT_GIBBS_ITERS)
    return cfg, model, gibbs_iters


def _holdout(tensor, fraction, seed):
    split_seed = int(stream(seed, "holdout").integers(2**63))
    return train_test_split(tensor, fraction, split_seed)


# ---------------------------------------------------------------- training

def train_model(train, cfg, model, gibbs_iters):
    """Fit ``model`` on ``train``; returns ``(checkpoint, trace_header, trace)``."""
    if model == "vae-bptf":
        state, bank, report = fit(train, cfg)
        means = posterior_mean_factors(train, state, bank, cfg)
        info = {"iterations_run": report.iterations_run, "converged": report.converged}
        return Checkpoint(model, cfg, means, state, bank, info), "elbo", report.elbo_trace
    res = gibbs_fit(train, cfg.K, (cfg.prior_shape, cfg.prior_rate), gibbs_iters,
                    rng=stream(cfg.seed, "gibbs"))
    info = {"iterations_run": gibbs_iters, "burn_in": gibbs_iters // 2}
    return Checkpoint(model, cfg, res.means, res.state, None, info), "log_prob", res.log_prob_trace


def _write_run(out, ckpt, trace_name, trace, manifest):
    save_checkpoint(ckpt, out / "checkpoint.bin")
    _write(out / "trace.tsv", _table(["iter", trace_name],
                                     [(i + 1, float(q)) for i, q in enumerate(trace)]))
    rows = list(manifest.items())
    rows += [(f"config.{k}", v) for k, v in ckpt.config.to_dict().items()]
    rows += [(f"result.{k}", v) for k, v in ckpt.info.items()]
    # the only non-reproducible line of any output
    rows.append(("timestamp", datetime.now(timezone.utc).isoformat(timespec="seconds")))
    _write(out / "manifest.tsv", _table(["key", "value"], rows))


def cmd_generate(args):
    out = _out_dir(args.out)
    truth = generate(args.modes, args.k, args.alpha, args.beta, stream(args.seed, "generate"))
    save_tensor(truth.tensor, out / "tensor.tsv")
    save_truth(truth, out / "truth.tsv")
    density = truth.tensor.nnz / float(np.prod(truth.mode_sizes))
    print(_table(["file", "nnz", "density"],
                 [(str(out / "tensor.tsv"), truth.tensor.nnz, density)]), end="")
    return EXIT_OK


def cmd_train(args):
    cfg, model, gibbs_iters = _resolve(args)
    tensor = load_tensor(args.data)
    out = _out_dir(args.out)
    train = tensor
    manifest = {"command": "train", "model": model, "data": args.data, "threads": args.threads}
    if args.holdout:
        split = _holdout(tensor, args.holdout, cfg.seed)
        train = split.train
        save_tensor(split.train, out / "train.tsv")
        save_tensor(split.test, out / "test.tsv")
        manifest["holdout"] = args.holdout
    if model == "gibbs-bptf":
        manifest["gibbs_iters"] = gibbs_iters
    log.info("training %s on %d entries", model, train.nnz)
    ckpt, trace_name, trace = train_model(train, cfg, model, gibbs_iters)
    _write_run(out, ckpt, trace_name, trace, manifest)
    print(_table(["checkpoint", "iterations", "final_" + trace_name],
                 [(str(out / "checkpoint.bin"), len(trace), float(trace[-1]))]), end="")
    return EXIT_OK


def cmd_evaluate(args):
    if args.cv:
        return _cross_validate(args)
    if not args.checkpoint:
        raise UsageError("--checkpoint is required unless --cv is given")
    ckpt = load_checkpoint(args.checkpoint)
    test = load_tensor(args.data)
    metrics = evaluate_means(test, ckpt.means, round_predictions=args.round)
    print(_table(["metric", "value"], [("mae", metrics.mae), ("holdout_ll", metrics.holdout_ll),
                                       ("n_test", metrics.n_test)]), end="")
    return EXIT_OK


def _cross_validate(args):
    if not args.grid:
        raise UsageError("--cv requires --grid")
    cfg, model, _ = _resolve(args)
    grid = load_grid(args.grid)
    train = load_tensor(args.data)
    best, table = cross_validate(train, grid, folds=args.cv, seed=cfg.seed, base=cfg,
                                 threads=args.threads, model=model)
    keys = list(grid[0])
    header = ["cell", *keys, *[f"fold{f + 1}_mae" for f in range(args.cv)], "mean_mae", "selected"]
    rows = []
    for row in table:
        chosen = "yes" if row["overrides"] == best else "no"
        rows.append((row["cell"], *[row["overrides"][k] for k in keys],
                     *[float(m) for m in row["fold_mae"]], row["mean_mae"], chosen))
    print(_table(header, rows), end="")
    return EXIT_OK


def cmd_neighbors(args):
    ckpt = load_checkpoint(args.checkpoint)
    if not 0 <= args.mode < len(ckpt.means):
        raise DataError(f"mode {args.mode} out of range")
    factors = ckpt.means[args.mode]
    docs = load_incidence(args.incidence) if args.incidence else None
    if args.all:
        return _neighbors_all(factors, args, docs)
    if args.entity is None:
        raise UsageError("--entity is required unless --all is given")
    entities, dist = top_k_neighbors(factors, args.entity, args.k)
    if docs is None:
        rows = [(r, e, float(d)) for r, (e, d) in enumerate(zip(entities, dist), start=1)]
        print(_table(["rank", "entity", "distance"], rows), end="")
        return EXIT_OK
    report = coherence_pmi({args.entity: entities}, docs, args.min_df)
    rows = [(r, e, float(d)) for r, (e, d) in enumerate(zip(entities, dist), start=1)]
    print(_table(["rank", "entity", "distance"], rows), end="")
    print()
    print(_table(["probe", "list_npmi"], [(args.entity, report.scores[args.entity])]), end="")
    return EXIT_OK


def _neighbors_all(factors, args, docs):
    k = args.k if args.k is not None else 10
    lists = {p: top_k_neighbors(factors, p, k)[0] for p in range(factors.shape[0])}
    if docs is None:
        print(_table(["probe", "neighbors"], [(p, ns) for p, ns in lists.items()]), end="")
        return EXIT_OK
    report = coherence_pmi(lists, docs, args.min_df)
    excluded = set(report.excluded)
    rows = [(p, ns, report.scores[p], "yes" if p in excluded else "no")
            for p, ns in lists.items()]
    print(_table(["probe", "neighbors", "list_npmi", "excluded"], rows), end="")
    print()
    print(_table(["corpus_average", "n_probes", "n_excluded"],
                 [(report.average, len(lists) - len(excluded), len(excluded))]), end="")
    return EXIT_OK


def cmd_ablate(args):
    cfg, _, _ = _resolve(args)
    tensor = load_tensor(args.data)
    if args.test:
        train, test = tensor, load_tensor(args.test)
        check_same_shape(train, test)
    else:
        split = _holdout(tensor, args.holdout, cfg.seed)
        train, test = split.train, split.test
    out = _out_dir(args.out)
    rows = []
    for arm, reweight in (("reweighted", True), ("unweighted", False)):
        arm_cfg = cfg.replace(reweight=reweight)
        ckpt, trace_name, trace = train_model(train, arm_cfg, "vae-bptf", DEFAULT_GIBBS_ITERS)
        arm_dir = _out_dir(out / arm)
        _write_run(arm_dir, ckpt, trace_name, trace,
                   {"command": "ablate", "arm": arm, "data": args.data})
        m = evaluate_means(test, ckpt.means)
        rows.append((arm, m.mae, m.holdout_ll, m.n_test))
    rows.append(("difference", rows[0][1] - rows[1][1], rows[0][2] - rows[1][2], rows[0][3]))
    print(_table(["arm", "mae", "holdout_ll", "n_test"], rows), end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="vaebptf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic tensor and its truth sidecar")
    g.add_argument("--modes", type=_ints, required=True, help="mode sizes, e.g. 30,30,30")
    g.add_argument("--k", type=int, required=True, help="number of true latent factors")
    g.add_argument("--alpha", type=float, default=2.0, help="hyper shape")
    g.add_argument("--beta", type=float, default=0.25, help="hyper scale")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--k", type=int, help="number of latent factors (overrides the config)")
        p.add_argument("--threads", type=int, default=_default_threads(),
                       help="worker threads (default: $BPTF_THREADS or 1)")

    t = sub.add_parser("train", help="fit a model and write checkpoint, trace and manifest")
    common(t)
    t.add_argument("--model", choices=("vae-bptf", "gibbs-bptf"))
    t.add_argument("--data", required=True, help="training tensor")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--no-reweight", action="store_true", help="force all row weights to 1")
    t.add_argument("--holdout", type=_fraction,
                   help="hold out this fraction of entries; writes train.tsv and test.tsv")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="held-out metrics, or grid search by cross-validation")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True, help="test tensor (training tensor with --cv)")
    e.add_argument("--round", action="store_true", help="round predictions before the MAE")
    e.add_argument("--cv", type=int, help="number of folds")
    e.add_argument("--grid", help="grid file with | separated alternatives")
    e.add_argument("--model", choices=("vae-bptf", "gibbs-bptf"))
    e.add_argument("--no-reweight", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    n = sub.add_parser("neighbors", help="nearest entities in posterior-mean factor space")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--mode", type=int, required=True)
    n.add_argument("--entity", type=int)
    n.add_argument("--k", type=int, default=10, help="list length, probe included")
    n.add_argument("--all", action="store_true", help="every entity of the mode as a probe")
    n.add_argument("--incidence", help="document-entity incidence file for NPMI")
    n.add_argument("--min-df", type=float, default=0.001,
                   help="document-frequency floor for the corpus average")
    n.set_defaults(func=cmd_neighbors)

    a = sub.add_parser("ablate", help="paired fits with and without reweighting")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--test", help="test tensor; otherwise a holdout split is drawn")
    a.add_argument("--holdout", type=_fraction, default=0.2)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"vaebptf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"vaebptf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DataError as exc:
        print(f"vaebptf: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
