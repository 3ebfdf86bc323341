"""Command-line front end: split, fit, evaluate, recommend, ppc, stats, filter.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from dcpf import evaluation as ev
from dcpf.inference import FitConfig, fit, load_model, save_model
from dcpf.sparse_data import (
    DataError,
    SparseCountMatrix,
    dispersion_stats,
    filter_min_degree,
    load_triplets,
    save_triplets,
    split,
)

DIST_CHOICES = ("log", "ztp", "geo", "shnb", "pf-raw", "pf-bin")


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _echo_config(args):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print("# config " + json.dumps(cfg, default=str, sort_keys=True), file=sys.stderr)


def _thresholds(text):
    try:
        return tuple(int(x) if float(x).is_integer() else float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None


def _model_dirs(path: Path) -> list[Path]:
    if (path / "meta").exists():
        return [path]
    runs = sorted(p for p in path.glob("run_*") if (p / "meta").exists())
    if not runs:
        raise FileNotFoundError(f"no model found under {path}")
    return runs


def _best_model_dir(path: Path) -> Path:
    dirs = _model_dirs(path)
    if len(dirs) == 1:
        return dirs[0]
    best = path / "best"
    if best.exists():
        return path / best.read_text().strip()
    return max(dirs, key=lambda d: load_model(d).final_elbo)


def cmd_split(args):
    data = load_triplets(args.data)
    pair = split(data, args.fraction, args.seed)
    save_triplets(pair.train, args.out_train)
    save_triplets(pair.test, args.out_test)
    print(f"train nnz={pair.train.nnz} test nnz={pair.test.nnz}")


def _config_from_args(args, seed) -> FitConfig:
    if args.dist in ("pf-raw", "pf-bin"):
        mode, kind = args.dist.replace("-", "_"), "geo"
    else:
        mode, kind = "dcpf", args.dist
    fixed = args.fixed_theta
    if args.fixed_p is not None:
        fixed = math.log(args.fixed_p)
    return FitConfig(
        K=args.k,
        alpha_w=args.alpha,
        alpha_h=args.alpha,
        tol=args.tol,
        max_iters=args.max_iters,
        seed=seed,
        mode=mode,
        kind=kind,
        y_max=args.y_max,
        fixed_theta=fixed,
        kappa2_init=args.kappa2_init,
        estimate_kappa2=not args.fixed_kappa2,
        kappa2_method=args.kappa2_method,
    )


def cmd_fit(args):
    data = load_triplets(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = ["run\tseed\titerations\tconverged\tfinal_elbo\ttheta\tkappa2"]
    best = None
    for r in range(args.runs):
        seed = args.seed + r
        cfg = _config_from_args(args, seed)

        def log_iter(it, value, state, r=r):
            th = state.dist.theta if state.dist else float("nan")
            k2 = state.dist.kappa2 if state.dist else float("nan")
            print(f"{it}\t{value:.17g}\t{th:.17g}\t{k2:.17g}", file=sys.stderr)

        print(f"# run {r} seed {seed}", file=sys.stderr)
        model = fit(data, cfg, callback=None if args.quiet else log_iter)
        if model.theta_boundary:
            print(f"warning: run {r} theta estimate hit the domain boundary", file=sys.stderr)
        name = f"run_{r:02d}"
        save_model(model, out / name)
        d = model.state.dist
        summary.append(
            f"{name}\t{seed}\t{model.iterations}\t{str(model.converged).lower()}\t{model.final_elbo:.17g}"
            f"\t{d.theta if d else float('nan'):.17g}\t{d.kappa2 if d else float('nan'):.17g}"
        )
        if best is None or model.final_elbo > best[1]:
            best = (name, model.final_elbo)
    summary.append(f"# best\t{best[0]}")
    (out / "summary").write_text("\n".join(summary) + "\n")
    (out / "best").write_text(best[0] + "\n")
    print("\n".join(summary))


def cmd_evaluate(args):
    train = load_triplets(args.train)
    test = load_triplets(args.test)
    models = [load_model(d) for d in _model_dirs(Path(args.model))]
    if test.shape != train.shape:
        # test files may infer smaller dimensions without a header
        if test.n_rows > train.n_rows or test.n_cols > train.n_cols:
            raise DataError("test matrix larger than train matrix")
        test = SparseCountMatrix(train.n_rows, train.n_cols, test.rows, test.cols, test.values)
    report = ev.evaluate(models, train, test, m=args.m, thresholds=args.thresholds)
    text = "\n".join(report.lines()) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
        Path(str(args.out) + ".json").write_text(json.dumps(report.to_record(), indent=2, sort_keys=True) + "\n")


def cmd_recommend(args):
    train = load_triplets(args.train)
    model = load_model(_best_model_dir(Path(args.model)))
    rec = ev.recommend(model, train, args.user, args.m)
    for rank, (i, s) in enumerate(zip(rec.items, rec.scores), start=1):
        print(f"{rank}\t{int(i)}\t{s:.17g}")


def cmd_ppc(args):
    train = load_triplets(args.train)
    model = load_model(_best_model_dir(Path(args.model)))
    rng = np.random.default_rng(args.seed)
    sim = ev.ppc_simulate(model, rng, plugin_mean=args.plugin_mean, budget=args.budget)
    hist = ev.ppc_histogram(train, sim)
    table = hist.table()
    sys.stdout.write(table)
    if args.out:
        Path(args.out).write_text(table)
        Path(str(args.out) + ".json").write_text(json.dumps(hist.to_record(), indent=2) + "\n")


def cmd_stats(args):
    data = load_triplets(args.data)
    st = dispersion_stats(data)
    print(f"rows\t{data.n_rows}\ncols\t{data.n_cols}\nnnz\t{data.nnz}")
    print(f"nnz_fraction\t{st['nnz_fraction']:.6g}")
    print(f"mean\t{st['mean']:.6g}\nvariance\t{st['variance']:.6g}\nratio var/mean\t{st['ratio']:.6g}")


def cmd_filter(args):
    data = load_triplets(args.data)
    out, _, _ = filter_min_degree(data, args.min_degree, fixed_point=not args.once)
    save_triplets(out, args.out)
    print(f"kept {out.n_rows} rows, {out.n_cols} cols, {out.nnz} entries")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcpf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="random train/test split of the nonzeros")
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("fit", help="fit dcPF or a PF baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--dist", choices=DIST_CHOICES, default="geo")
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--max-iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--y-max", type=int, default=1000)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--fixed-theta", type=float, default=None)
    g.add_argument("--fixed-p", type=float, default=None, help="pin theta = log(p)")
    p.add_argument("--kappa2-init", type=float, default=1.0)
    p.add_argument("--fixed-kappa2", action="store_true", help="do not estimate the shnb shape")
    p.add_argument("--kappa2-method", choices=("profile", "em"), default="profile",
                   help="shnb shape step: joint optimum with theta profiled out, or one augmented EM step")
    p.add_argument("--threads", type=int, default=0, help="accepted for scripting; results do not depend on it")
    p.add_argument("--quiet", action="store_true", help="suppress the per-iteration trace")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="NDCG-s of top-m recommendations")
    p.add_argument("--model", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--thresholds", type=_thresholds, default=ev.DEFAULT_THRESHOLDS)
    p.add_argument("--threads", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="top-m unseen items for one user")
    p.add_argument("--model", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--m", type=int, default=100)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("ppc", help="posterior predictive histogram")
    p.add_argument("--model", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plugin-mean", action="store_true")
    p.add_argument("--budget", type=int, default=ev.PPC_BUDGET)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ppc)

    p = sub.add_parser("stats", help="dispersion statistics of the nonzeros")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("filter", help="drop rows/cols with at most --min-degree entries")
    p.add_argument("--data", required=True)
    p.add_argument("--min-degree", type=int, default=20)
    p.add_argument("--once", action="store_true", help="single pass instead of a fixed point")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _echo_config(args)
    try:
        args.func(args)
    except (DataError, ValueError, FileNotFoundError, OSError, ev.PpcBudgetError) as exc:
        _err(str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
