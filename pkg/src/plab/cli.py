"""Command-line entry point: ``plab <subcommand>``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .harness import (
    CORPUS_KINDS,
    ExperimentSpec,
    MatrixContext,
    default_spec,
    emit_report,
    generate_corpus,
    load_distances,
    load_records,
    run_distances,
    run_matrix,
    write_corpus,
    write_spec,
)
from .models import load_checkpoint
from .repmetrics import METRICS, fit_locality_slope, profile_from_runs


def _out_dir(args, spec: ExperimentSpec | None = None) -> Path:
    env = os.environ.get("PLAB_OUT")
    if env:
        return Path(env)
    if args.out:
        return Path(args.out)
    return Path(spec.out_dir if spec else "plab_out")


def _load_spec(args) -> ExperimentSpec:
    spec = ExperimentSpec.load(args.config) if args.config else default_spec()
    if args.seed is not None:
        spec = spec.with_changes(seeds=(args.seed,))
    return spec.with_changes(out_dir=str(_out_dir(args, spec)))


def _parse_cell(text: str) -> tuple[str, str, str]:
    parts = text.split(":")
    if len(parts) != 3 or not all(parts):
        raise argparse.ArgumentTypeError(f"--cell expects MODEL:OBJ:COND, got {text!r}")
    return parts[0], parts[1], parts[2]


def cmd_gen_corpus(args) -> int:
    seqs = generate_corpus(args.kind, args.size, args.seed or 0, source=args.source)
    path = write_corpus(_out_dir(args) / "corpus.txt", seqs)
    print(f"wrote {len(seqs)} sequences to {path}")
    return 0


def cmd_pretrain(args) -> int:
    spec = _load_spec(args)
    ctx = MatrixContext(spec)
    for m in spec.models:
        for seed in spec.seeds:
            ctx.pretrained(m.name, seed)
            print(f"pretrained {m.name} seed {seed} ({ctx.pretrain_key(m.name, seed)})")
    return 0


def cmd_run(args) -> int:
    spec = _load_spec(args)
    ctx = MatrixContext(spec)
    write_spec(spec, ctx.out_dir)
    cells = None
    if args.cell:
        model, obj, cond = args.cell
        cells = [(model, obj, cond, seed) for seed in spec.seeds]
    results = run_matrix(spec, jobs=args.jobs, cells=cells, ctx=ctx)
    failed = 0
    for r in results:
        rec = r.record
        if rec.ok:
            print(f"{rec.model}:{rec.objective}:{rec.condition} seed {rec.seed}  alpha_P={rec.slopes['procrustes'].alpha:.4g}  ({rec.wall_time:.1f}s)")
        else:
            failed += 1
            print(f"{rec.model}:{rec.objective}:{rec.condition} seed {rec.seed}  FAILED {rec.error}")
    return 1 if failed else 0


def cmd_profile(args) -> int:
    """Depth profile between two checkpoints on the experiment's probe set."""
    spec = _load_spec(args)
    if not (args.before and args.after):
        print("profile needs --before and --after checkpoints", file=sys.stderr)
        return 2
    before, after = load_checkpoint(args.before), load_checkpoint(args.after)
    ctx = MatrixContext(spec)
    ids, mask = ctx.probes.arrays(before.config)
    profiles = profile_from_runs(before, after, ids, mask, spec.depths, METRICS)
    w = csv.writer(sys.stdout)
    w.writerow(["metric", *(f"d{d:.2f}" for d in spec.depths), "alpha"])
    for m, p in profiles.items():
        w.writerow([m, *(repr(v) for v in p.values), repr(fit_locality_slope(p).alpha)])
    return 0


def cmd_distance(args) -> int:
    spec = _load_spec(args)
    ctx = MatrixContext(spec)
    for m in spec.models:
        for seed in spec.seeds:
            rep = run_distances(ctx, m.name, seed)
            for obj, e in sorted(rep.entries.items()):
                print(f"{m.name} seed {seed} {obj:12s} procrustes={e['procrustes']:.4f} coherence={e['coherence']:.3f}")
    return 0


def cmd_report(args) -> int:
    out = _out_dir(args)
    records = load_records(out / "records")
    if not records:
        print(f"no records under {out / 'records'}", file=sys.stderr)
        return 1
    dist_dir = out / "distances"
    distances = load_distances(dist_dir) if dist_dir.exists() else None
    for f in emit_report(records, out / "report", distances):
        print(f)
    return 0


def cmd_selftest(args) -> int:
    """Fast numerical sanity checks; exit status 1 on any failure."""
    from .gradcore import Parameter, Tensor, backward, gelu, layernorm, mul, sum_
    from .repmetrics import linear_cka, procrustes_distance
    from .stats import sign_test_pvalue, spearman_rho

    rng = np.random.default_rng(args.seed or 0)
    checks = []

    x = rng.normal(size=(4, 6))
    g, b, w = rng.normal(size=6), rng.normal(size=6), rng.normal(size=(4, 6))

    def f(xv):
        return float(np.sum(w * gelu(layernorm(Tensor(xv), Tensor(g), Tensor(b))).data))

    p = Parameter("x", x.copy())
    grad = backward(sum_(mul(gelu(layernorm(p, Tensor(g), Tensor(b))), Tensor(w))))["x"]
    eps = 1e-6
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = eps
        num[idx] = (f(x + e) - f(x - e)) / (2 * eps)
    checks.append(("layernorm+gelu gradient", np.max(np.abs(num - grad)) / np.max(np.abs(num)) < 1e-6))

    a = rng.normal(size=(50, 8))
    q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    checks.append(("procrustes rotation invariance", procrustes_distance(a, a @ q) < 1e-10))
    checks.append(("cka rotation+scale invariance", abs(linear_cka(a, 3.0 * a @ q) - 1.0) < 1e-10))
    checks.append(("sign test", sign_test_pvalue(8, 9) == 0.0390625 and sign_test_pvalue(9, 9) == 0.00390625))
    checks.append(("spearman reversed", spearman_rho([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0))
    for name, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return 0 if all(ok for _, ok in checks) else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON (defaults to the built-in toy matrix)")
    common.add_argument("--seed", type=int, help="restrict to a single seed")
    common.add_argument("--out", help="output directory (PLAB_OUT overrides)")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for independent cells")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="plab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic or byte-level corpus")
    p.add_argument("--kind", choices=CORPUS_KINDS, default="zipf-synthetic")
    p.add_argument("--size", type=int, default=4000)
    p.add_argument("--source", help="text file for byte-text corpora")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain", parents=[common], help="pretrain (or load cached) base models")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", parents=[common], help="run the experiment matrix, or one --cell")
    p.add_argument("--cell", type=_parse_cell, help="MODEL:OBJ:COND")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("profile", parents=[common], help="depth profile between two checkpoints")
    p.add_argument("--before")
    p.add_argument("--after")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("distance", parents=[common], help="objective distances on pretrained bases")
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("report", parents=[common], help="CSV tables and SVG plots from saved records")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", parents=[common], help="quick numerical sanity checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
