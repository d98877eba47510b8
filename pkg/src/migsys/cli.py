"""``migsys`` command-line driver.

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure
(``replay`` also returns 3 when outputs are not reproduced).

Every command writes a run manifest next to its output: ``<file>.manifest.json``
for file outputs and ``manifest.json`` inside directory outputs. The
manifest holds the argument vector, the parsed options, input and output
SHA-256 digests, software versions and wall time; ``migsys replay`` reruns
it and compares output digests.

Threads: ``--threads`` (default ``$MIGSYS_THREADS`` or 1) only runs fit
restarts concurrently. Each restart is seeded on its own and the winner is
chosen by (final loss, seed), so results do not depend on the thread count.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .community import build_report, hard_partition
from .errors import DataError, NumericalError
from .io import (
    NodeRegistry,
    PeriodAxis,
    Schema,
    build_tensor,
    export_model,
    import_model,
    load_bundle,
    load_edge_list,
    save_bundle,
    write_partition,
    write_reports,
)
from .selection import rank_scan, select_rank
from .solver import INIT_SCHEMES, MASK_STRATEGIES, FitOptions, default_threads, fit
from .synth import PlantSpec, plant_model, synth_tensor
from .walktrap import compare_pre_post

log = logging.getLogger("migsys")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _files(path):
    p = Path(path)
    if p.is_dir():
        return sorted(q for q in p.iterdir() if q.is_file() and q.name != "manifest.json")
    return [p] if p.exists() else []


def _manifest_path(output) -> Path:
    p = Path(output)
    return p / "manifest.json" if p.is_dir() else p.with_name(p.name + ".manifest.json")


def _write_manifest(argv, args, inputs, output, started, extra=None):
    opts = {k: (str(v) if isinstance(v, Path) else v)
            for k, v in sorted(vars(args).items()) if k != "func"}
    doc = {
        "argv": list(argv),
        "command": args.command,
        "options": opts,
        "seed": opts.get("seed"),
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": {str(q): _digest(q) for q in _files(output)},
        "software": {
            "migsys": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        doc.update(extra)
    _manifest_path(output).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def _schema(args) -> Schema:
    delim = {"comma": ",", "tab": "\t", "auto": None}[args.delimiter]
    return Schema(args.origin_col, args.dest_col, args.period_col, args.count_col,
                  delim, args.suppressed_token, args.count_kind)


def _add_schema_flags(p):
    g = p.add_argument_group("input columns")
    g.add_argument("--origin-col", default="origin")
    g.add_argument("--dest-col", default="destination")
    g.add_argument("--period-col", default="period")
    g.add_argument("--count-col", default="count")
    g.add_argument("--delimiter", choices=("auto", "comma", "tab"), default="auto")
    g.add_argument("--suppressed-token", default="d")
    g.add_argument("--count-kind", choices=("integer", "real"), default="integer")


def _add_fit_flags(p, with_rank=True):
    if with_rank:
        p.add_argument("--rank", type=_positive_int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=_positive_int, default=5)
    p.add_argument("--tol", type=_positive_float, default=1e-7)
    p.add_argument("--max-iters", type=_positive_int, default=500)
    p.add_argument("--mask-strategy", choices=MASK_STRATEGIES, default="exact-masked")
    p.add_argument("--init", choices=INIT_SCHEMES, default="mixed")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="concurrent restarts (default $MIGSYS_THREADS or 1)")


def _fit_options(args, rank) -> FitOptions:
    return FitOptions(
        rank=rank,
        max_outer_iters=args.max_iters,
        tol=args.tol,
        restarts=args.restarts,
        seed=args.seed,
        mask_strategy=args.mask_strategy,
        init=args.init,
        threads=args.threads or default_threads(),
    )


# -- commands ---------------------------------------------------------------

def cmd_ingest(args):
    edges = load_edge_list(args.input, _schema(args))
    X, mask, registry, periods = build_tensor(edges.records, periods=edges.period_axis())
    counters = edges.counters()
    save_bundle(args.output, X, registry, periods, mask, counters)
    for k, v in counters.items():
        print(f"{k}\t{v}")
    print(f"tensor\t{X.shape[0]}x{X.shape[1]}x{X.shape[2]}")
    return [args.input], args.output, {"counters": counters}


def cmd_fit(args):
    X, mask, registry, periods, _ = load_bundle(args.bundle)
    result = fit(X, mask, _fit_options(args, args.rank))
    summary = {
        "relative_residual": result.relative_residual,
        "seed_used": result.seed_used,
        "converged": result.converged,
        "iterations": result.iterations_used,
    }
    export_model(result.model, registry, periods, args.output, extra=summary)
    print(f"relative_residual\t{result.relative_residual:.6e}")
    print(f"seed_used\t{result.seed_used}")
    print(f"converged\t{result.converged}")
    return [args.bundle], args.output, summary


def cmd_rank_scan(args):
    X, mask, _, _, _ = load_bundle(args.bundle)
    curve = rank_scan(X, mask, args.max_rank, _fit_options(args, 1))
    chosen = select_rank(curve, args.tau)
    lines = ["rank,relative_residual,seed"]
    lines += [f"{r},{res!r},{s}" for r, res, s in curve.rows()]
    text = "\n".join(lines) + "\n"
    Path(args.output).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    print(f"selected_rank\t{chosen}")
    return [args.bundle], args.output, {"selected_rank": chosen}


def cmd_report(args):
    model, origins, dests, periods, _ = import_model(args.model)
    k = args.top_k
    limit = min(model.shape[0], model.shape[1])
    if k > limit:
        log.warning("--top-k %d exceeds the node count; clamped to %d", k, limit)
        k = limit
    reports = [build_report(model, f, k, origins.ids, dests.ids, args.shock_z)
               for f in range(model.rank)]
    write_reports(reports, periods, args.output)
    for r in sorted(reports, key=lambda r: r.rank_by_lambda):
        shocks = ",".join(periods.labels[p] for p in r.shock_flags) or "-"
        print(f"system {r.rank_by_lambda}\tweight {r.weight:.6g}\t"
              f"top origin {r.top_origins[0][0]}\ttop destination {r.top_destinations[0][0]}\t"
              f"shocks {shocks}")
    return [args.model], args.output, None


def cmd_partition(args):
    model, origins, dests, _, _ = import_model(args.model)
    ids = origins.ids if args.side == "origin" else dests.ids
    part = hard_partition(model, args.side, ids, args.smooth_k)
    write_partition(part, args.output, ids)
    for lab, size in part.sizes().items():
        print(f"community {lab}\t{size} nodes")
    return [args.model], args.output, {"flagged": part.flagged}


def cmd_walktrap(args):
    edges = load_edge_list(args.input, _schema(args))
    cmp = compare_pre_post(edges.records, args.split, args.focal, args.t,
                           periods=edges.period_axis())
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    order = [row[0] for row in cmp.table]
    write_partition(cmp.pre, out / "pre.csv", order)
    write_partition(cmp.post, out / "post.csv", order)
    with open(out / "agreement.csv", "w", encoding="utf-8") as fh:
        fh.write("node_id,pre,post\n")
        for node, a, b in cmp.table:
            fh.write(f"{node},{a},{b}\n")
    summary = {"modularity_pre": cmp.pre.modularity, "modularity_post": cmp.post.modularity}
    if cmp.focal is not None:
        (out / "focal.json").write_text(json.dumps(cmp.focal, indent=1) + "\n", encoding="utf-8")
        summary["focal"] = {k: cmp.focal[k] for k in ("node", "pre_size", "post_size")}
        print(f"focal {cmp.focal['node']}\tpre size {cmp.focal['pre_size']}\t"
              f"post size {cmp.focal['post_size']}")
    print(f"modularity\tpre {cmp.pre.modularity:.6f}\tpost {cmp.post.modularity:.6f}")
    return [args.input], out, summary


def cmd_synth(args):
    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ValueError("plant spec must be a JSON object")
        spec = PlantSpec.from_dict(raw)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid plant spec: {exc}") from None
    if spec.I != spec.J:
        raise UsageError("tensor bundles need I == J (one node set)")
    truth = plant_model(spec)
    X, mask = synth_tensor(truth, spec.noise_sigma, spec.seed)
    width = len(str(spec.I - 1))
    registry = NodeRegistry([f"n{i:0{width}d}" for i in range(spec.I)])
    periods = PeriodAxis([str(k) for k in range(spec.K)])
    save_bundle(args.output, X, registry, periods, mask, extra={"plant_spec": spec.to_dict()})
    export_model(truth, registry, periods, args.truth, extra={"plant_spec": spec.to_dict()})
    print(f"tensor\t{spec.I}x{spec.J}x{spec.K}\tplanted rank {spec.F}")
    return [args.config], args.output, {"truth_model": str(args.truth)}


def cmd_replay(args):
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    argv = manifest["argv"]
    if argv and argv[0] == "replay":
        raise UsageError("refusing to replay a replay")
    status = main(argv)
    if status != EXIT_OK:
        return status
    expected = manifest["outputs"]
    bad = [p for p, d in expected.items() if not Path(p).exists() or _digest(p) != d]
    for p in sorted(expected):
        print(f"{'MISMATCH' if p in bad else 'same'}\t{p}")
    return EXIT_NUMERICAL if bad else EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="migsys", description="Migration systems from flow tensors.")
    parser.add_argument("--version", action="version", version=f"migsys {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="edge list -> tensor bundle")
    p.add_argument("input", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    _add_schema_flags(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="masked nonnegative CP fit of a bundle")
    p.add_argument("bundle", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("rank-scan", help="residual curve and elbow rank")
    p.add_argument("bundle", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--max-rank", type=_positive_int, default=8)
    p.add_argument("--tau", type=_positive_float, default=0.01)
    _add_fit_flags(p, with_rank=False)
    p.set_defaults(func=cmd_rank_scan)

    p = sub.add_parser("report", help="per-system tables from a model")
    p.add_argument("model", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--top-k", type=_positive_int, default=10)
    p.add_argument("--shock-z", type=_positive_float, default=3.0)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("partition", help="hard node partition from a model")
    p.add_argument("model", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--side", choices=("origin", "destination"), default="origin")
    p.add_argument("--smooth-k", type=int, default=0)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("walktrap", help="pre/post walktrap partitions around a split period")
    p.add_argument("input", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--focal")
    p.add_argument("--t", type=_positive_int, default=4, help="walk length")
    _add_schema_flags(p)
    p.set_defaults(func=cmd_walktrap)

    p = sub.add_parser("synth", help="planted bundle and truth model from a JSON spec")
    p.add_argument("config", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("replay", help="rerun a manifest and compare output digests")
    p.add_argument("manifest", type=Path)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        out = args.func(args)
        if isinstance(out, int):
            return out
        inputs, output, extra = out
        _write_manifest(argv, args, inputs, output, started, extra)
        return EXIT_OK
    except UsageError as exc:
        print(f"migsys: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"migsys: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"migsys: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"migsys: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
