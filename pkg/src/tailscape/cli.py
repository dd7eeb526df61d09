"""Command-line entry point: data generation, training runs, probes, comparisons.

Exit codes: 0 success, 1 usage/config error, 2 numerical abort, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import grouping, ltdata, probes
from .config import VARIANTS, ConfigError, TrainConfig, resolve_config
from .net import MLP, load_checkpoint, load_vectors, save_checkpoint, save_vectors
from .trainer import NumericalError, RunResult, Trainer, split_batch

log = logging.getLogger("tailscape")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which is reserved for numerical aborts
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def output_root(args) -> Path:
    return Path(args.out or os.environ.get("TAILSCAPE_OUT") or "runs")


def config_hash(cfg: TrainConfig, fingerprint: str) -> str:
    return hashlib.sha256((cfg.to_text() + fingerprint).encode()).hexdigest()[:12]


def new_run_dir(root: Path, tag: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    root.mkdir(parents=True, exist_ok=True)
    for k in range(1000):
        name = f"{stamp}-{tag}" + (f"-{k}" if k else "")
        try:
            (root / name).mkdir()
            return root / name
        except FileExistsError:
            continue
    raise OSError(f"could not create a run directory under {root}")


def load_data(path) -> tuple[ltdata.DataBundle, str]:
    if path is None:
        return ltdata.benchmark_bundle(), "benchmark"
    return ltdata.load_bundle(path), str(path)


def config_from_args(args) -> TrainConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed = {args.seed}")
    return resolve_config(args.config, overrides)


# -- run artifacts ---------------------------------------------------------------

def save_run(run_dir: Path, result: RunResult, bundle: ltdata.DataBundle, source: str):
    cfg, net = result.cfg, result.net
    (run_dir / "config.txt").write_text(cfg.to_text())
    (run_dir / "dataset.txt").write_text(
        f"fingerprint = {bundle.fingerprint()}\nsource = {source}\n")
    write_csv(run_dir / "metrics.csv", result.metric_fields,
              ([m.get(k, "") for k in result.metric_fields] for m in result.metrics))
    C = bundle.train.num_classes
    write_csv(run_dir / "eval.csv",
              ["epoch", "overall", "many", "med", "few"] + [f"acc_c{c}" for c in range(C)],
              ([r.epoch, r.overall, r.many, r.med, r.few, *r.per_class_acc] for r in result.reports))
    write_csv(run_dir / "quality.csv", ["epoch", "class", "q"], result.quality)
    save_checkpoint(run_dir / "model.bin", net, result.theta)
    bank = result.bank
    save_vectors(run_dir / "bank.bin", net.arch, list(bank.snapshots))
    (run_dir / "bank.json").write_text(json.dumps({
        "best_q": bank.best_q.tolist(), "epoch_found": bank.epoch_found.tolist()}, indent=2))
    part = result.partition
    if part is not None:
        save_vectors(run_dir / "fisher.bin", net.arch, list(part.fisher))
        (run_dir / "groups.json").write_text(json.dumps({
            "assignment": part.assignment.tolist(), "n_samples": part.n_samples.tolist(),
            "n_classes": part.n_classes.tolist()}, indent=2))
    (run_dir / "probes.json").write_text(json.dumps(result.probes, indent=2))


def dump_nan(run_dir: Path, err: NumericalError):
    (run_dir / "nan_dump.json").write_text(json.dumps(err.dump, indent=2, default=str))


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(args):
    spec = ltdata.GaussianMixtureSpec(C=args.classes, p=args.dim, n_max=args.n_max, r=args.ratio,
                                      radius=args.radius, covariance_scale=args.cov,
                                      seed=args.seed or 0)
    try:
        spec.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    bundle = ltdata.make_bundle(spec, args.holdout, args.test)
    out = Path(args.out or "data")
    ltdata.save_bundle(bundle, out)
    print(f"wrote {out} counts={bundle.train.class_counts.tolist()} "
          f"fingerprint={bundle.fingerprint()[:16]}")


def cmd_train(args):
    cfg = config_from_args(args)
    bundle, source = load_data(args.data)
    run_dir = new_run_dir(output_root(args), config_hash(cfg, bundle.fingerprint()))
    (run_dir / "config.txt").write_text(cfg.to_text())
    try:
        result = Trainer(bundle, cfg).run()
    except NumericalError as e:
        dump_nan(run_dir, e)
        raise
    save_run(run_dir, result, bundle, source)
    f = result.final
    print(f"{run_dir}\noverall={f.overall:.4f} many={f.many:.4f} med={f.med:.4f} "
          f"few={f.few:.4f} tail_lambda_max={result.probes.get('tail_lambda_max', float('nan')):.4g}")


def _probe_batch(args):
    net, theta = load_checkpoint(args.checkpoint)
    bundle, _ = load_data(args.data)
    ds = bundle.train
    if args.split == "all":
        X, y = ds.X, ds.y
    else:
        X, y = split_batch(ds, args.split)
    if len(y) == 0:
        raise UsageError(f"split {args.split} has no samples")
    return net, theta, ds, X, y


def _probe_out(args) -> Path:
    return Path(args.out) if args.out else Path(args.checkpoint).parent


def _append_report(path: Path, key: str, values: dict):
    report = json.loads(path.read_text()) if path.exists() else {}
    report.setdefault(key, {}).update(values)
    path.write_text(json.dumps(report, indent=2, sort_keys=True))


def cmd_probe(args):
    if args.probe == "floor":
        return probe_floor(args)
    if args.probe == "grouping":
        return probe_grouping(args)
    if not args.checkpoint:
        raise UsageError(f"probe {args.probe} needs --checkpoint")
    net, theta, ds, X, y = _probe_batch(args)
    out = _probe_out(args)
    out.mkdir(parents=True, exist_ok=True)
    key = str(Path(args.checkpoint).resolve())
    if args.probe == "hessian":
        gf = probes.batch_grad_fn(net, X, y)
        vals = {f"{args.split}_lambda_max": probes.lambda_max(gf, theta, args.iters, args.seed or 0),
                f"{args.split}_trace": probes.hessian_trace(gf, theta, args.probes_n, args.seed or 0)}
        _append_report(out / "probe_report.json", key, vals)
        print(json.dumps(vals))
    elif args.probe == "landscape":
        alphas, grid = probes.landscape_grid(probes.batch_loss_fn(net, X, y), theta,
                                             args.resolution, args.span, args.seed or 0,
                                             blocks=net.blocks())
        path = out / f"landscape_{args.split}.csv"
        write_csv(path, ["alpha"] + [_fmt(a) for a in alphas],
                  ([a, *row] for a, row in zip(alphas, grid)))
        print(f"wrote {path}")
    elif args.probe == "gradsim":
        rows = gradsim_epoch(net, theta, ds, args.batch_size, args.seed or 0)
        path = out / "gradsim.csv"
        write_csv(path, ["class", "split", "mean_similarity", "batches"], rows)
        for r in rows:
            print(f"class {r[0]} ({r[1]}): {r[2]:.4f}")


def gradsim_epoch(net: MLP, theta, ds: ltdata.LongTailDataset, batch_size=64, seed=0):
    """Per-class cosine with the batch gradient, averaged over one shuffled epoch."""
    order = np.random.default_rng(seed).permutation(len(ds))
    sums = np.zeros(ds.num_classes)
    hits = np.zeros(ds.num_classes, dtype=int)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        for c, s in probes.gradient_similarity(net, theta, ds.X[idx], ds.y[idx]).items():
            sums[c] += s
            hits[c] += 1
    return [(c, ds.split[c], sums[c] / hits[c] if hits[c] else float("nan"), int(hits[c]))
            for c in range(ds.num_classes)]


def probe_grouping(args):
    if not args.run:
        raise UsageError("probe grouping needs --run DIR")
    run = Path(args.run)
    _, snaps = load_vectors(run / "bank.bin")
    meta = json.loads((run / "bank.json").read_text())
    bank = grouping.MemoryBank(len(snaps), len(snaps[0]))
    bank.snapshots = np.array(snaps)
    bank.best_q = np.array(meta["best_q"])
    bank.epoch_found = np.array(meta["epoch_found"])
    bank.populated[:] = True
    W = grouping.build_affinity(bank)
    labels = grouping.ncut_partition(W, args.groups, seed=args.seed or 0)
    vals, _ = grouping.laplacian_spectrum(W)
    out = {"assignment": labels.tolist(), "ncut": grouping.ncut_value(W, labels),
           "affinity": W.tolist(),
           "laplacian_eigenvalues": vals.tolist(), "epoch_found": meta["epoch_found"]}
    print(json.dumps(out, indent=2))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "grouping.json").write_text(json.dumps(out, indent=2))


def probe_floor(args):
    prob = probes.QuadraticProblem(dim=args.dim, groups=args.groups, noise=args.noise,
                                   seed=args.seed or 0)
    seeds = range(args.seeds)
    big = probes.convergence_floor(prob, args.lr, args.rho, args.steps, seeds)
    small = probes.convergence_floor(prob, args.lr / 2, args.rho / 2, args.steps, seeds)
    out = {"lr": args.lr, "rho": args.rho, "floor": big, "floor_halved": small,
           "ratio": big / small if small > 0 else float("inf")}
    print(json.dumps(out, indent=2))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "floor.json").write_text(json.dumps(out, indent=2))


SUMMARY_KEYS = ("overall", "many", "med", "few", "tail_lambda_max")


def compare(bundle: ltdata.DataBundle, variants, seeds, base: TrainConfig):
    """Run every variant on every seed; returns (per-run rows, per-variant summary)."""
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant(s): {', '.join(unknown)}")
    rows = []
    for v in variants:
        for s in seeds:
            res = Trainer(bundle, base.replace(variant=v, seed=s)).run()
            f = res.final
            rows.append({"variant": v, "seed": s, "overall": f.overall, "many": f.many,
                         "med": f.med, "few": f.few,
                         "tail_lambda_max": res.probes.get("tail_lambda_max", float("nan"))})
    summary = {}
    for v in dict.fromkeys(variants):
        sel = [r for r in rows if r["variant"] == v]
        summary[v] = {k: (float(np.mean([r[k] for r in sel])), float(np.std([r[k] for r in sel])))
                      for k in SUMMARY_KEYS}
    return rows, summary


def format_summary(summary) -> str:
    lines = [f"{'variant':<12}" + "".join(f"{k:>20}" for k in SUMMARY_KEYS)]
    for v, stats in summary.items():
        lines.append(f"{v:<12}" + "".join(f"{m:>11.4f} ± {s:<6.4f}" for m, s in stats.values()))
    return "\n".join(lines)


def cmd_compare(args):
    base = config_from_args(args)
    bundle, _ = load_data(args.data)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    start = base.seed
    rows, summary = compare(bundle, variants, range(start, start + args.seeds), base)
    out = new_run_dir(output_root(args), "compare-" + config_hash(base, bundle.fingerprint()))
    (out / "config.txt").write_text(base.to_text())
    header = ["variant", "seed", *SUMMARY_KEYS]
    write_csv(out / "runs.csv", header, ([r[k] for k in header] for r in rows))
    write_csv(out / "summary.csv",
              ["variant"] + [f"{k}_{s}" for k in SUMMARY_KEYS for s in ("mean", "std")],
              ([v] + [x for m_s in st.values() for x in m_s] for v, st in summary.items()))
    print(format_summary(summary))
    print(out)


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default $TAILSCAPE_OUT or ./runs)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = deterministic)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="tailscape", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a long-tailed Gaussian dataset")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--dim", type=int, default=2)
    g.add_argument("--n-max", type=int, default=500)
    g.add_argument("--ratio", type=float, default=100.0)
    g.add_argument("--radius", type=float, default=ltdata.BENCHMARK_RADIUS)
    g.add_argument("--cov", type=float, default=1.0)
    g.add_argument("--holdout", type=int, default=ltdata.BENCHMARK_HOLDOUT)
    g.add_argument("--test", type=int, default=ltdata.BENCHMARK_TEST)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one configuration")
    t.add_argument("--data", help="dataset directory from gen-data (default: benchmark)")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("probe", parents=[common], help="loss-geometry diagnostics")
    pr.add_argument("probe", choices=["hessian", "landscape", "gradsim", "grouping", "floor"])
    pr.add_argument("--checkpoint", help="model.bin from a run directory")
    pr.add_argument("--data", help="dataset directory (default: benchmark)")
    pr.add_argument("--split", default="Few", choices=["Many", "Med", "Few", "all"])
    pr.add_argument("--iters", type=int, default=100)
    pr.add_argument("--probes-n", type=int, default=100)
    pr.add_argument("--resolution", type=int, default=21)
    pr.add_argument("--span", type=float, default=1.0)
    pr.add_argument("--batch-size", type=int, default=64)
    pr.add_argument("--run", help="run directory (grouping)")
    pr.add_argument("--groups", type=int, default=4)
    pr.add_argument("--lr", type=float, default=0.05)
    pr.add_argument("--rho", type=float, default=0.2)
    pr.add_argument("--steps", type=int, default=4000)
    pr.add_argument("--seeds", type=int, default=10)
    pr.add_argument("--dim", type=int, default=10)
    pr.add_argument("--noise", type=float, default=1.0)
    pr.set_defaults(func=cmd_probe)

    c = sub.add_parser("compare", parents=[common], help="variant x seed ablation table")
    c.add_argument("--data", help="dataset directory (default: benchmark)")
    c.add_argument("--variants", default="CE,CE+GKP,CE+GKP+GSA")
    c.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed")
    c.set_defaults(func=cmd_compare)
    return p


def _thread_limit(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            args.func(args)
    except NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
