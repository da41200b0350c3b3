"""Benchmark and utility command line.

Subcommands cover the full loop: synthesize data (`gen`), build and persist
an index (`build`), compute exact answers (`gt`), run filtered queries
(`query`), sweep the recall/cost trade-off (`sweep`), measure update
throughput (`update-bench`), turn a predicate into a persistent label
(`integrate`), and compact (`rebuild`).

Conventions:

* exit code 0 on success, 1 for usage errors, 2 for runtime failures;
* ``--config FILE`` (TOML or JSON) supplies defaults; explicit flags win;
* CSV outputs start with ``# config: ...`` / ``# version: ...`` comments,
  binary outputs get a ``<name>.meta.json`` sidecar instead;
* files named by ``--out``/``--out-*`` are removed again if the command
  dies halfway.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import threading
import time

import numpy as np

from . import dataset as ds
from . import maintenance, oracle, predicate, search, tree
from .util import rng_for, version_string

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse, but usage problems exit 1 instead of 2."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _vec_format(path: str, explicit: str = None) -> str:
    if explicit:
        return explicit
    ext = os.path.splitext(path)[1].lstrip(".").lower()
    return ext if ext in ds.VECTOR_FORMATS else "fvecs"


def _parse_ef(text: str):
    if text.lower() in ("inf", "none", "unbounded"):
        return None
    ef = int(text)
    if ef < 1:
        raise _UsageError(f"ef must be >= 1 or 'inf', got {ef}")
    return ef


def _load_config(path: str) -> dict:
    with open(path, "rb") as fh:
        if path.endswith(".json"):
            cfg = json.load(fh)
        else:
            cfg = tomllib.load(fh)
    if not isinstance(cfg, dict):
        raise _UsageError(f"{path}: config must be a table/object at top level")
    return {k.replace("-", "_"): v for k, v in cfg.items()}


def _apply_config(parser, argv, args):
    """Re-parse with config-file values as defaults (flags still win).

    Defaults must be installed on the subcommand's own parser: a subparser
    parses into a fresh namespace, so top-level defaults would be shadowed
    by its static ones.
    """
    if not getattr(args, "config", None):
        return args
    cfg = _load_config(args.config)
    sub = parser.sub_by_name[args.command]
    valid = {a.dest for a in sub._actions}
    unknown = set(cfg) - valid
    if unknown:
        raise _UsageError(f"unknown config keys for '{args.command}': "
                          f"{', '.join(sorted(unknown))}")
    if "ef" in cfg and cfg["ef"] is not None:
        cfg["ef"] = _parse_ef(str(cfg["ef"]))
    if "efs" in cfg and not isinstance(cfg["efs"], str):
        cfg["efs"] = ",".join(str(v) for v in cfg["efs"])
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


class _Outputs:
    """Tracks files created by this run so failures can clean them up."""

    def __init__(self):
        self.paths = []

    def claim(self, path: str) -> str:
        self.paths.append(path)
        return path

    def discard_all(self):
        for p in self.paths:
            try:
                os.unlink(p)
            except OSError:
                pass


def _write_meta(outs: _Outputs, path: str, command: str, config: dict):
    meta = {
        "tool": "filtree",
        "version": version_string(),
        "command": command,
        "config": config,
    }
    with open(outs.claim(path + ".meta.json"), "w", encoding="ascii") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _csv_writer(fh, config: dict, columns):
    fh.write(f"# config: {json.dumps(config, sort_keys=True)}\n")
    fh.write(f"# version: {version_string()}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    return w


def _public_args(args) -> dict:
    skip = {"func", "config"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen(args, outs: _Outputs):
    if args.selectivities:
        levels = [float(t) for t in args.selectivities.split(",") if t]
    else:
        spec0 = ds.SelectivitySpec.log_spaced(args.log_levels, args.sel_min,
                                              args.sel_max)
        levels = spec0.levels
    spec = ds.SelectivitySpec(levels, args.labels_per_level, args.correlated)
    data, assign = ds.generate_synthetic(args.n, args.dim, spec, seed=args.seed)
    fmt = _vec_format(args.out_vectors, args.format)
    ds.save_vectors(data.vectors, outs.claim(args.out_vectors), fmt)
    ds.save_labels(assign, outs.claim(args.out_labels))
    cfg = _public_args(args)
    _write_meta(outs, args.out_vectors, "gen", cfg)
    print(f"wrote {data.n} x {data.dim} vectors ({fmt}) and "
          f"{len(spec.levels) * spec.labels_per_level} labels")
    return 0


def _load_dataset(args) -> tuple:
    fmt = _vec_format(args.vectors, getattr(args, "format", None))
    vectors = ds.load_vectors(args.vectors, fmt, dim=getattr(args, "dim", None))
    data = ds.Dataset(vectors)
    assign = ds.load_labels(args.labels, n_expected=data.n)
    return data, assign


def _cmd_build(args, outs: _Outputs):
    data, assign = _load_dataset(args)
    cfg = tree.TreeConfig(
        branch_factor=args.branch_factor,
        leaf_capacity=args.leaf_capacity,
        slot_bits=args.slot_bits,
        buffer_capacity=args.buffer_capacity,
        kmeans_iters=args.kmeans_iters,
    )
    from .labels import BloomConfig, build_all_labels
    bloom = BloomConfig(target_fp_rate=args.bloom_fp, exact_sets=args.exact_sets)
    t0 = time.perf_counter()
    index = tree.build(data, cfg, seed=args.seed, bloom=bloom)
    build_all_labels(index, data, assign)
    elapsed = time.perf_counter() - t0
    tree.save_index(index, outs.claim(args.out))
    _write_meta(outs, args.out, "build", _public_args(args))
    n_labels = len(index.registry.counts)
    print(f"built index over {data.n} vectors, {n_labels} labels "
          f"in {elapsed:.2f}s -> {args.out}")
    for w in index.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def _predicate_of(args):
    if getattr(args, "label", None) is not None and getattr(args, "predicate", None):
        raise _UsageError("give either --label or --predicate, not both")
    if getattr(args, "label", None) is not None:
        return predicate.Label(args.label)
    if getattr(args, "predicate", None):
        return predicate.parse_predicate(args.predicate)
    raise _UsageError("one of --label or --predicate is required")


def _load_queries(args) -> np.ndarray:
    fmt = _vec_format(args.queries, getattr(args, "queries_format", None))
    return ds.load_vectors(args.queries, fmt, dim=getattr(args, "dim", None))


def _cmd_gt(args, outs: _Outputs):
    data, assign = _load_dataset(args)
    queries = _load_queries(args)
    pred = _predicate_of(args)
    truths = [oracle.exact_filtered_knn(data, assign, q, pred, args.k)
              for q in queries]
    oracle.write_ground_truth(outs.claim(args.out), truths)
    cfg = _public_args(args)
    cfg["qualified_counts"] = sorted({t.qualified_count for t in truths})
    _write_meta(outs, args.out, "gt", cfg)
    print(f"wrote exact answers for {len(queries)} queries -> {args.out}")
    return 0


def _run_queries(index, queries, pred, params):
    """One result row per query: (result, latency_us)."""
    rows = []
    single = isinstance(pred, predicate.Label)
    for q in queries:
        t0 = time.perf_counter_ns()
        if single:
            res = search.search_label(index, q, pred.value, params)
        else:
            res = predicate.search_predicate(index, q, pred, params)
        rows.append((res, (time.perf_counter_ns() - t0) / 1000.0))
    return rows


def _cmd_query(args, outs: _Outputs):
    index = tree.load_index(args.index)
    queries = _load_queries(args)
    pred = _predicate_of(args)
    params = search.SearchParams(k=args.k, ef=args.ef,
                                 beam_width=args.beam_width, alpha=args.alpha)
    truths = oracle.read_ground_truth(args.gt) if args.gt else None
    if truths is not None and len(truths) != len(queries):
        raise ValueError(f"{args.gt}: {len(truths)} answers for {len(queries)} queries")

    if args.readers > 1:
        # Same workload from several threads; the read lock must make them
        # all see the identical index, so their answers must agree.
        results = [None] * args.readers
        def work(i):
            results[i] = [r.keys() for r, _ in _run_queries(index, queries, pred, params)]
        threads = [threading.Thread(target=work, args=(i,)) for i in range(args.readers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for i in range(1, args.readers):
            if results[i] != results[0]:
                raise RuntimeError(f"reader {i} diverged from reader 0")
        print(f"{args.readers} concurrent readers returned identical results")

    rows = _run_queries(index, queries, pred, params)
    cfg = _public_args(args)
    cfg["ef"] = "inf" if args.ef is None else args.ef
    with open(outs.claim(args.out), "w", encoding="ascii") as fh:
        w = _csv_writer(fh, cfg, [
            "query", "k", "ef", "hits", "recall", "centroid_dists",
            "vector_dists", "nodes_popped", "buffers_visited", "latency_us",
        ])
        recalls = []
        for i, (res, lat) in enumerate(rows):
            rec = ""
            if truths is not None:
                rec = search.recall_at_k(res.keys(), truths[i].keys, args.k)
                recalls.append(rec)
                rec = f"{rec:.6f}"
            st = res.stats
            w.writerow([i, args.k, "inf" if args.ef is None else args.ef,
                        len(res.hits), rec, st.centroid_dists, st.vector_dists,
                        st.nodes_popped, st.buffers_visited, f"{lat:.1f}"])
    msg = f"ran {len(rows)} queries -> {args.out}"
    if recalls:
        msg += f" (mean recall {np.mean(recalls):.4f})"
    print(msg)
    return 0


def _cmd_sweep(args, outs: _Outputs):
    index = tree.load_index(args.index)
    queries = _load_queries(args)
    if args.label_list:
        preds = [predicate.Label(int(t)) for t in args.label_list.split(",") if t]
    else:
        preds = [_predicate_of(args)]
    efs = [_parse_ef(t) for t in args.efs.split(",") if t]
    if not efs:
        raise _UsageError("--efs must list at least one value")

    # Exact answers: from a gt file (single filter only) or by scanning the
    # dataset files per filter.
    truth_by_pred = {}
    if args.gt:
        if len(preds) != 1:
            raise _UsageError("--gt only applies to a single --label/--predicate")
        truths = oracle.read_ground_truth(args.gt)
        if len(truths) != len(queries):
            raise ValueError(f"{args.gt}: {len(truths)} answers for {len(queries)} queries")
        truth_by_pred[str(preds[0])] = truths
    else:
        if not (args.vectors and args.labels):
            raise _UsageError("sweep needs --gt or both --vectors and --labels")
        data, assign = _load_dataset(args)
        for pred in preds:
            truth_by_pred[str(pred)] = [
                oracle.exact_filtered_knn(data, assign, q, pred, args.k)
                for q in queries
            ]

    cfg = _public_args(args)
    with open(outs.claim(args.out), "w", encoding="ascii") as fh:
        w = _csv_writer(fh, cfg, [
            "filter", "ef", "k", "mean_recall", "mean_latency_us", "qps",
            "mean_centroid_dists", "mean_vector_dists", "mean_nodes_popped",
        ])
        for pred in preds:
            truths = truth_by_pred[str(pred)]
            for ef in efs:
                params = search.SearchParams(k=args.k, ef=ef,
                                             beam_width=args.beam_width,
                                             alpha=args.alpha)
                rows = _run_queries(index, queries, pred, params)
                recs = [search.recall_at_k(res.keys(), truths[i].keys, args.k)
                        for i, (res, _) in enumerate(rows)]
                lats = [lat for _, lat in rows]
                w.writerow([
                    str(pred), "inf" if ef is None else ef, args.k,
                    f"{np.mean(recs):.6f}", f"{np.mean(lats):.1f}",
                    f"{1e6 / np.mean(lats):.1f}",
                    f"{np.mean([r.stats.centroid_dists for r, _ in rows]):.1f}",
                    f"{np.mean([r.stats.vector_dists for r, _ in rows]):.1f}",
                    f"{np.mean([r.stats.nodes_popped for r, _ in rows]):.1f}",
                ])
                print(f"filter {pred} ef={'inf' if ef is None else ef}: "
                      f"recall {np.mean(recs):.4f}, {np.mean(lats):.0f} us/query")
    print(f"swept {len(preds) * len(efs)} operating points -> {args.out}")
    return 0


def _cmd_update_bench(args, outs: _Outputs):
    index = tree.load_index(args.index)
    rng = rng_for(args.seed, "update-bench")
    keys = sorted(index.key_to_raw)
    labels = index.registry.live_labels()
    labels = [l for l in labels if not index.registry.is_virtual(l)]
    next_key = max(keys, default=0) + 1

    timings = {"insert": [], "delete": []}
    for _ in range(args.deletes):
        victim = keys.pop(int(rng.integers(len(keys))))
        t0 = time.perf_counter_ns()
        maintenance.delete_vector(index, victim)
        timings["delete"].append((time.perf_counter_ns() - t0) / 1000.0)
    for _ in range(args.inserts):
        vec = rng.standard_normal(index.dim).astype(np.float32)
        tag = ([int(rng.choice(labels))] if labels and rng.random() < args.label_rate
               else [])
        t0 = time.perf_counter_ns()
        maintenance.insert_vector(index, next_key, vec, tag)
        timings["insert"].append((time.perf_counter_ns() - t0) / 1000.0)
        keys.append(next_key)
        next_key += 1

    rebuilt = []
    rebuild_us = 0.0
    if args.rebuild_mode != "off":
        t0 = time.perf_counter_ns()
        rebuilt = maintenance.run_rebuilds(index, mode=args.rebuild_mode,
                                           seed=args.seed)
        rebuild_us = (time.perf_counter_ns() - t0) / 1000.0

    problems = maintenance.check_invariants(index)
    if problems:
        for p in problems:
            print(f"invariant violation: {p}", file=sys.stderr)
        raise RuntimeError(f"{len(problems)} invariant violations after updates")

    cfg = _public_args(args)
    with open(outs.claim(args.out), "w", encoding="ascii") as fh:
        w = _csv_writer(fh, cfg, [
            "op", "count", "mean_latency_us", "p50_latency_us",
            "p95_latency_us", "max_latency_us",
        ])
        for op in ("delete", "insert"):
            lats = timings[op]
            if not lats:
                continue
            w.writerow([op, len(lats), f"{np.mean(lats):.1f}",
                        f"{np.percentile(lats, 50):.1f}",
                        f"{np.percentile(lats, 95):.1f}", f"{max(lats):.1f}"])
        if args.rebuild_mode != "off":
            w.writerow(["rebuild", len(rebuilt), f"{rebuild_us:.1f}", "", "", ""])
    if args.save_index:
        tree.save_index(index, outs.claim(args.save_index))
        _write_meta(outs, args.save_index, "update-bench", cfg)
    print(f"applied {args.deletes} deletes + {args.inserts} inserts, "
          f"rebuilt {len(rebuilt)} subtrees, invariants clean -> {args.out}")
    return 0


def _cmd_integrate(args, outs: _Outputs):
    index = tree.load_index(args.index)
    pred = predicate.parse_predicate(args.predicate)
    virt = predicate.integrate_as_virtual_label(index, pred)
    tree.save_index(index, outs.claim(args.out))
    cfg = _public_args(args)
    cfg["virtual_label"] = virt
    _write_meta(outs, args.out, "integrate", cfg)
    print(f"integrated {pred} as label {virt} "
          f"({index.registry.count(virt)} members) -> {args.out}")
    return 0


def _cmd_rebuild(args, outs: _Outputs):
    index = tree.load_index(args.index)
    if args.force and not index.rebuild_queue:
        index.rebuild_queue.append(())
    rebuilt = maintenance.run_rebuilds(index, mode=args.mode, seed=args.seed)
    tree.save_index(index, outs.claim(args.out))
    _write_meta(outs, args.out, "rebuild", _public_args(args))
    print(f"rebuilt {len(rebuilt)} subtrees -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="TOML/JSON file of option defaults")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> _Parser:
    parser = _Parser(prog="filtree",
                     description="filtered vector search benchmark tool")
    parser.add_argument("--version", action="version", version=version_string())
    subs = parser.add_subparsers(dest="command", required=True)
    parser.sub_by_name = {}

    def subcommand(name, **kw):
        p = subs.add_parser(name, **kw)
        parser.sub_by_name[name] = p
        return p

    p = subcommand("gen", help="synthesize vectors + labels")
    _add_common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--selectivities", help="comma list, e.g. 0.05,0.01")
    p.add_argument("--log-levels", type=int, default=20)
    p.add_argument("--sel-min", type=float, default=0.001)
    p.add_argument("--sel-max", type=float, default=0.2)
    p.add_argument("--labels-per-level", type=int, default=10)
    p.add_argument("--correlated", action="store_true")
    p.add_argument("--format", choices=ds.VECTOR_FORMATS)
    p.add_argument("--out-vectors", required=True)
    p.add_argument("--out-labels", required=True)
    p.set_defaults(func=_cmd_gen)

    p = subcommand("build", help="build an index snapshot")
    _add_common(p)
    p.add_argument("--vectors", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--format", choices=ds.VECTOR_FORMATS)
    p.add_argument("--dim", type=int, help="for raw vector files")
    p.add_argument("--branch-factor", type=int, default=16)
    p.add_argument("--leaf-capacity", type=int, default=64)
    p.add_argument("--slot-bits", type=int, default=8)
    p.add_argument("--buffer-capacity", type=int)
    p.add_argument("--kmeans-iters", type=int, default=25)
    p.add_argument("--bloom-fp", type=float, default=0.01)
    p.add_argument("--exact-sets", action="store_true",
                   help="exact per-node label sets instead of Bloom filters")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build)

    p = subcommand("gt", help="exact answers by linear scan")
    _add_common(p)
    p.add_argument("--vectors", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--format", choices=ds.VECTOR_FORMATS)
    p.add_argument("--dim", type=int)
    p.add_argument("--queries", required=True)
    p.add_argument("--queries-format", choices=ds.VECTOR_FORMATS)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--label", type=int)
    p.add_argument("--predicate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gt)

    p = subcommand("query", help="run filtered queries against an index")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--queries-format", choices=ds.VECTOR_FORMATS)
    p.add_argument("--dim", type=int)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--ef", type=_parse_ef, default=64,
                   help="candidate budget; 'inf' for unbounded")
    p.add_argument("--beam-width", type=int, default=4)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--label", type=int)
    p.add_argument("--predicate")
    p.add_argument("--gt", help="exact answers for recall")
    p.add_argument("--readers", type=int, default=1,
                   help="verify N concurrent readers agree")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_query)

    p = subcommand("sweep", help="recall/cost sweep over ef values")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--queries-format", choices=ds.VECTOR_FORMATS)
    p.add_argument("--dim", type=int)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--efs", default="16,32,64,128,256")
    p.add_argument("--beam-width", type=int, default=4)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--label", type=int)
    p.add_argument("--label-list", help="comma list: one sweep per label")
    p.add_argument("--predicate")
    p.add_argument("--gt", help="exact answers (single filter only)")
    p.add_argument("--vectors", help="dataset, to compute exact answers here")
    p.add_argument("--labels", help="label file, to compute exact answers here")
    p.add_argument("--format", choices=ds.VECTOR_FORMATS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = subcommand("update-bench", help="measure insert/delete latency")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--inserts", type=int, default=0)
    p.add_argument("--deletes", type=int, default=0)
    p.add_argument("--label-rate", type=float, default=0.5,
                   help="fraction of inserts that also attach a label")
    p.add_argument("--rebuild-mode", choices=("local", "global", "off"),
                   default="local")
    p.add_argument("--save-index")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_update_bench)

    p = subcommand("integrate", help="persist a predicate as a label")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--predicate", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_integrate)

    p = subcommand("rebuild", help="run queued subtree rebuilds")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--mode", choices=("local", "global"), default="local")
    p.add_argument("--force", action="store_true",
                   help="rebuild the root even if nothing is queued")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_rebuild)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    outs = _Outputs()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(parser, argv, args)
        return args.func(args, outs)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        outs.discard_all()
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
