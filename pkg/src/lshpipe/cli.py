"""Command-line driver: gen-data, ground-truth, build, search, sweep, report."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time

from lshpipe import harness
from lshpipe.dataio import read_vectors, write_vectors
from lshpipe.harness import (
    DataConfig,
    ExperimentConfig,
    ExperimentReport,
    SyntheticSpec,
    append_csv,
    recompute_recall,
    run_experiment,
    sweep,
    write_report,
)
from lshpipe.partition import census_from_counts
from lshpipe.synthetic import gen_synthetic
from lshpipe.truth import brute_force_knn, save_ground_truth


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON; flags below override file values")
    p.add_argument("--run-id")
    g = p.add_argument_group("family")
    g.add_argument("--seed", type=int)
    g.add_argument("--tables", "-L", dest="L", type=int)
    g.add_argument("--functions", "-M", dest="M", type=int)
    g.add_argument("--width", "-w", dest="w", type=float)
    g = p.add_argument_group("search")
    g.add_argument("--neighbors", "-k", dest="k", type=int)
    g.add_argument("--probes", "-T", dest="T", type=int)
    g.add_argument("--candidate-cap", type=int)
    g = p.add_argument_group("strategy")
    g.add_argument("--strategy", choices=["mod", "zorder", "lshmap"])
    g.add_argument("--map-w", type=float)
    g = p.add_argument_group("topology")
    g.add_argument("--n-bi", type=int)
    g.add_argument("--n-dp", type=int)
    g.add_argument("--n-ag", type=int)
    g.add_argument("--bi-threads", type=int)
    g.add_argument("--dp-threads", type=int)
    g.add_argument("--transport", choices=["inproc", "socket"])
    g.add_argument("--n-processes", type=int)
    g = p.add_argument_group("data")
    g.add_argument("--base", help="reference vector file (.fvecs/.bvecs)")
    g.add_argument("--query", help="query vector file")
    g.add_argument("--truth", help="ground-truth id file (.ivecs)")
    g.add_argument("--base-count", type=int)
    g.add_argument("--query-count", type=int)
    g.add_argument("--n-points", type=int, help="synthetic reference size")
    g.add_argument("--n-queries", type=int)
    g.add_argument("--dim", "-d", dest="d", type=int)
    g.add_argument("--clusters", type=int)
    g.add_argument("--spread", type=float)
    g.add_argument("--data-seed", type=int)


def _config_from_args(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    fam = {key: getattr(args, key) for key in ("seed", "L", "M", "w") if getattr(args, key) is not None}
    if fam:
        config = dataclasses.replace(config, family=dataclasses.replace(config.family, **fam))
    sea = {
        key: getattr(args, name)
        for key, name in (("k", "k"), ("T", "T"), ("candidate_cap", "candidate_cap"))
        if getattr(args, name) is not None
    }
    if sea:
        config = dataclasses.replace(config, search=dataclasses.replace(config.search, **sea))
    if args.strategy is not None or args.map_w is not None:
        st = {}
        if args.strategy is not None:
            st["kind"] = args.strategy
        if args.map_w is not None:
            st["map_w"] = args.map_w
        config = dataclasses.replace(config, strategy=dataclasses.replace(config.strategy, **st))
    topo = {
        key: getattr(args, key)
        for key in ("n_bi", "n_dp", "n_ag", "bi_threads", "dp_threads", "transport", "n_processes")
        if getattr(args, key) is not None
    }
    if topo:
        config = dataclasses.replace(config, topology=dataclasses.replace(config.topology, **topo))
    if args.base is not None:
        config = dataclasses.replace(
            config,
            data=DataConfig(
                synthetic=None,
                base_path=args.base,
                query_path=args.query,
                truth_path=args.truth,
                base_count=args.base_count,
                query_count=args.query_count,
            ),
        )
    else:
        spec = config.data.synthetic or SyntheticSpec()
        syn = {
            field: getattr(args, name)
            for field, name in (
                ("n_points", "n_points"),
                ("n_queries", "n_queries"),
                ("d", "d"),
                ("n_clusters", "clusters"),
                ("spread", "spread"),
                ("seed", "data_seed"),
            )
            if getattr(args, name) is not None
        }
        if syn or config.data.synthetic is None:
            config = dataclasses.replace(
                config,
                data=dataclasses.replace(
                    config.data, synthetic=dataclasses.replace(spec, **syn), truth_path=args.truth or config.data.truth_path
                ),
            )
    if args.run_id:
        config = dataclasses.replace(config, run_id=args.run_id)
    return config


def _emit(report: ExperimentReport, args) -> None:
    print(report.render_text())
    if args.report:
        write_report(report, args.report)
        print(f"report written to {args.report}")
    if args.csv:
        append_csv(report, args.csv)


def cmd_gen_data(args) -> int:
    base, queries = gen_synthetic(
        args.data_seed,
        args.n_points,
        args.d,
        args.clusters,
        args.spread,
        n_queries=args.n_queries,
        query_noise=args.query_noise,
    )
    write_vectors(args.out_base, "float32", base)
    write_vectors(args.out_query, "float32", queries)
    print(f"wrote {len(base)} reference vectors to {args.out_base}")
    print(f"wrote {len(queries)} query vectors to {args.out_query}")
    return 0


def cmd_ground_truth(args) -> int:
    base = read_vectors(args.base, stop=args.base_count)
    queries = read_vectors(args.query, stop=args.query_count)
    t0 = time.perf_counter()
    truth = brute_force_knn(base, queries, args.k)
    save_ground_truth(args.out, truth)
    print(f"wrote exact {args.k}-NN for {len(queries)} queries to {args.out} "
          f"({time.perf_counter() - t0:.1f}s)")
    return 0


def cmd_build(args) -> int:
    config = _config_from_args(args)
    base, _, _ = harness.load_dataset(config.data)
    family = harness.resolve_family(config.family, base)
    strategy = harness.resolve_strategy(config.strategy, base, config.topology.n_dp)
    from lshpipe.stages import LshPipeline

    pipe = LshPipeline(
        family,
        strategy,
        config.topology.pipeline_topology(),
        transport=config.topology.transport,
    )
    try:
        build_s = pipe.build(base)
        cens = census_from_counts(pipe.dp_object_counts())
        print(f"indexed {len(base)} vectors in {build_s:.3f}s (w={family.w:.3f})")
        print(f"index entries: {pipe.index_entry_count()} over {config.topology.n_bi} BI copies")
        print(f"census: {cens.counts.tolist()} imbalance={cens.imbalance_pct:.3f}%")
    finally:
        pipe.close()
    return 0


def cmd_search(args) -> int:
    config = _config_from_args(args)
    report = run_experiment(config)
    _emit(report, args)
    return 0 if report.ok else 1


def cmd_sweep(args) -> int:
    config = _config_from_args(args)
    if args.axis == "topology":
        values = [tuple(int(x) for x in v.split("x")) for v in args.values.split(",")]
    elif args.axis == "strategy":
        values = args.values.split(",")
    else:
        values = [int(v) for v in args.values.split(",")]
    reports = sweep(config, args.axis, values)
    for report in reports:
        print(report.render_text())
    if args.csv:
        append_csv(reports, args.csv)
        print(f"csv appended to {args.csv}")
    if args.report:
        with open(args.report, "w") as fh:
            for report in reports:
                fh.write(json.dumps(json.loads(report.to_json())) + "\n")
        print(f"reports written to {args.report} (one JSON record per run)")
    return 0 if all(r.ok for r in reports) else 1


def cmd_report(args) -> int:
    with open(args.input) as fh:
        report = ExperimentReport.from_json(fh.read())
    offline = recompute_recall(report)
    print(report.render_text())
    print(f"recall recomputed from persisted results: {offline:.4f}")
    if abs(offline - report.recall) > 1e-9:
        print("WARNING: recomputed recall differs from the reported value", file=sys.stderr)
        return 1
    if args.csv:
        append_csv(report, args.csv)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lshpipe", description="distributed multi-probe LSH experiment driver"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a clustered synthetic dataset")
    p.add_argument("--out-base", required=True)
    p.add_argument("--out-query", required=True)
    p.add_argument("--n-points", type=int, default=100_000)
    p.add_argument("--n-queries", type=int, default=1000)
    p.add_argument("--dim", "-d", dest="d", type=int, default=128)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--spread", type=float, default=8.0)
    p.add_argument("--query-noise", type=float, default=None)
    p.add_argument("--data-seed", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ground-truth", help="exact brute-force k-NN ids")
    p.add_argument("--base", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--neighbors", "-k", dest="k", type=int, default=10)
    p.add_argument("--base-count", type=int)
    p.add_argument("--query-count", type=int)
    p.set_defaults(func=cmd_ground_truth)

    p = sub.add_parser("build", help="build the distributed index and report census")
    _add_config_flags(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("search", help="build, run the query batch, report recall/traffic")
    _add_config_flags(p)
    p.add_argument("--report", help="write full report JSON here")
    p.add_argument("--csv", help="append a CSV row here")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("sweep", help="sweep one axis over comma-separated values")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=["L", "M", "T", "strategy", "topology"])
    p.add_argument("--values", required=True, help="e.g. 1,2,4,8 or mod,zorder,lshmap or 2x8,4x8")
    p.add_argument("--report", help="write JSON-lines reports here")
    p.add_argument("--csv", help="append CSV rows here")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="re-render a saved report and recheck recall offline")
    p.add_argument("input")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
