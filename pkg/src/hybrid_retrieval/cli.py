"""Command line entry point: build, serve, query, links, train, eval, bench, synth.

Every command prints line-delimited JSON records on stdout. ``--config``
takes a JSON object whose keys are the command's option names (dashes or
underscores); explicit flags override it. Report commands also write TSV
tables and PNG figures into ``--out-dir``.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
import time
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bench, corpus, links, plotting, two_tower
from .corpus import IndexSchema
from .server import QueryServer, QueryService, ServiceConfig

log = logging.getLogger("hybrid_retrieval")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CommandError(Exception):
    """Input or validation failure reported as a JSON error with exit status 2."""


def emit(record: dict, stream=None) -> None:
    stream = stream or sys.stdout
    stream.write(json.dumps(record, default=_json_default) + "\n")
    stream.flush()


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serialisable: {type(value).__name__}")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"{what} not found: {p}")
    return p


# -- build / query / serve ----------------------------------------------------


def cmd_build(args) -> int:
    schema = IndexSchema.load(_require_file(args.schema, "schema"))
    t0 = time.perf_counter()
    try:
        index = corpus.build_from_file(_require_file(args.ingest, "ingest file"), schema, args.num_bits, args.seed)
    except corpus.IngestError as exc:
        raise CommandError(str(exc)) from exc
    except corpus.IndexValidationError as exc:
        raise CommandError(str(exc)) from exc
    size = corpus.save(index, args.out)
    emit(
        {
            "event": "build",
            "index": args.out,
            "numDocs": index.num_docs,
            "numClauses": index.num_clauses,
            "dim": index.dim,
            "numBits": index.num_bits,
            "bytes": size,
            "buildSeconds": time.perf_counter() - t0,
        }
    )
    return 0


def _service_config(args) -> ServiceConfig:
    config = ServiceConfig(
        index_path=args.index,
        max_batch=args.max_batch,
        default_k=args.default_k,
        num_bits=args.num_bits,
        quant_k_multiplier=args.quant_k_multiplier,
        granularity=args.granularity,
        quant_enabled=args.quant_enabled,
        host=args.host,
        port=args.port,
        workers=args.workers,
    )
    try:
        config.validate()
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    return config


def _load_index(path):
    try:
        return corpus.load(_require_file(path, "index"))
    except corpus.IndexFormatError as exc:
        raise CommandError(f"{type(exc).__name__}: {exc}") from exc


def cmd_query(args) -> int:
    """Answer one request (object or array) in-process, as the server would."""
    text = Path(args.request[1:]).read_text() if args.request.startswith("@") else args.request
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CommandError(f"request is not JSON: {exc}") from exc
    config = _service_config(args)
    with QueryService(_load_index(config.index_path), config) as service:
        status, body = service.handle(payload)
    emit({"status": status, "body": body})
    return 0 if status == 200 else EXIT_FAILURE


def cmd_serve(args) -> int:
    config = _service_config(args)
    service = QueryService(_load_index(config.index_path), config)
    server = QueryServer(service)
    host, port = server.address
    emit({"event": "listening", "host": host, "port": port, "workers": config.workers, "maxBatch": config.max_batch})

    def stop(signum, frame):
        # shutdown() blocks until serve_forever returns, so call it off-thread
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, stop)
    signal.signal(signal.SIGINT, stop)
    server.serve_forever()
    service.close()
    emit({"event": "stopped"})
    return 0


# -- links --------------------------------------------------------------------


def _split_pairs(pairs: Sequence[links.TrainingPair], holdout: float, seed: int):
    order = np.random.default_rng(seed).permutation(len(pairs))
    cut = len(pairs) - int(round(holdout * len(pairs)))
    return [pairs[i] for i in order[:cut]], [pairs[i] for i in order[cut:]]


def cmd_links(args) -> int:
    try:
        pairs = links.read_pairs(_require_file(args.pairs, "pairs file"))
        templates = links.read_templates(_require_file(args.templates, "templates file"))
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    if not pairs:
        raise CommandError("no training pairs")
    if not 0.0 <= args.holdout < 1.0:
        raise CommandError("holdout must be in [0, 1)")
    out = _out_dir(args)
    train, held = _split_pairs(pairs, args.holdout, args.seed)
    t0 = time.perf_counter()
    result = links.learn_links(train, templates, args.theta, args.method, args.lam, args.threshold, args.min_support)
    seconds = time.perf_counter() - t0

    export = links.export_to_index(result.serving, job_ids=sorted({p.job_id for p in pairs if p.job_id}))
    corpus.write_documents(out / "jobs.jsonl", export.documents, export.schema)
    (out / "schema.json").write_text(json.dumps(export.schema.to_dict()))
    (out / "seekers.json").write_text(json.dumps({s: q for s in export.seeker_nodes if (q := export.seeker_query(s))}))
    with open(out / "links.jsonl", "w") as fh:
        for link in result.kept:
            fh.write(json.dumps(links.link_to_record(link)) + "\n")

    qualities = sorted({c.quality for c in result.scored})
    thresholds = [args.threshold] + [q for q in qualities if q > args.threshold]
    eval_pairs = held or train
    rows = [dict(r, method=args.method) for r in links.link_tradeoff(result.scored, eval_pairs, thresholds)]
    plotting.write_table(out / "link_tradeoff.tsv", rows)
    plotting.plot_link_tradeoff(rows, out / "link_tradeoff.png")

    summary = {
        "event": "links",
        "method": args.method,
        "trainPairs": len(train),
        "heldOutPairs": len(held),
        "candidates": len(result.candidates),
        "kept": len(result.kept),
        "graphLinks": len(result.graph.links),
        "servingNodes": len(result.serving.nodes),
        "seconds": seconds,
        **{k: v for k, v in rows[0].items() if k in ("recall", "falsePositiveRate")},
    }
    if args.planted:
        planted = {links.link_from_record(r).meta_links for r in json.loads(Path(args.planted).read_text())}
        kept = {c.meta_links for c in result.kept}
        summary["plantedRecall"] = len(planted & kept) / len(planted) if planted else 0.0
        summary["spurious"] = len(kept - planted)
    emit(summary)
    return 0


# -- train / eval -------------------------------------------------------------


TRAIN_FIELDS = ("m", "n", "p", "K", "learning_rate", "stage2_lr_factor", "stage1_steps", "stage2_steps",
                "consolidation", "temperature", "eval_every", "eval_k", "seed")


def _train_config(args) -> two_tower.TrainConfig:
    tower = two_tower.TowerConfig(args.buckets, args.hidden, args.out_dim)
    config = two_tower.TrainConfig(tower=tower, **{f: getattr(args, f) for f in TRAIN_FIELDS})
    try:
        config.validate()
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    return config


def _pair_data(args):
    if args.pairs:
        try:
            data, _ = two_tower.read_pair_file(_require_file(args.pairs, "pairs file"), args.buckets)
        except ValueError as exc:
            raise CommandError(str(exc)) from exc
        return data
    data, _ = two_tower.make_clustered_data(args.synthetic, buckets=args.buckets, seed=args.seed)
    return data


def cmd_train(args) -> int:
    config = _train_config(args)
    data = _pair_data(args)
    holdout = args.holdout if args.holdout is not None else min(2048, len(data) // 5)
    if holdout and holdout < config.m:
        raise CommandError(f"holdout of {holdout} pairs is smaller than the batch size {config.m}")
    train_data, validation = data.split(holdout) if holdout else (data, None)
    if len(train_data) < config.m:
        raise CommandError(f"{len(train_data)} training pairs is fewer than the batch size {config.m}")
    out = _out_dir(args)
    t0 = time.perf_counter()
    try:
        result = two_tower.train(config, train_data, validation)
    except two_tower.TrainingDivergedError as exc:
        emit({"event": "diverged", "message": str(exc), "state": {k: v for k, v in exc.state.items() if k != "config"}})
        return EXIT_FAILURE
    result.model.save(out / "model.npz")
    result.stage1_model.save(out / "stage1.npz")
    two_tower.write_history(out / "history.jsonl", result.history)
    (out / "train_config.json").write_text(json.dumps(asdict(config), indent=2))

    plotting.plot_learning_curve(result.history, out / "learning_curve.png")
    summary = {"event": "train", "pairs": len(train_data), "seconds": time.perf_counter() - t0, "out": out}
    if validation is not None:
        key = f"inBatchRecall@{config.eval_k}"
        summary["stage1"] = {key: two_tower.mean_in_batch_recall(result.stage1_model, validation, config.m, config.eval_k)}
        summary["stage2"] = {key: two_tower.mean_in_batch_recall(result.model, validation, config.m, config.eval_k)}
    for record in result.history:
        emit({"event": "history", **record})
    emit(summary)
    return 0


def cmd_eval(args) -> int:
    try:
        model = two_tower.TowerModel.load(_require_file(args.model, "model"))
    except (OSError, KeyError, ValueError) as exc:
        raise CommandError(f"cannot load model: {exc}") from exc
    args.buckets = model.config.buckets
    data = _pair_data(args)
    m = min(args.batch, len(data))
    if args.k > m:
        raise CommandError(f"k={args.k} exceeds the in-batch pool of {m}")
    emit({"metric": f"inBatchRecall@{args.k}", "batch": m, "value": two_tower.mean_in_batch_recall(model, data, m, args.k)})
    if args.knn:
        if args.k > len(data.inventory):
            raise CommandError(f"k={args.k} exceeds the inventory of {len(data.inventory)}")
        value = two_tower.knn_recall(model, data.seekers, data.job_rows, data.inventory, args.k)
        emit({"metric": f"knnRecall@{args.k}", "inventory": len(data.inventory), "value": value})
    return 0


# -- bench --------------------------------------------------------------------


def cmd_bench(args) -> int:
    out = _out_dir(args)
    if args.index:
        index = _load_index(args.index)
        has_pass = bench.PASS_CLAUSE in index.clause_names
    else:
        index = bench.synthetic_index(bench.SyntheticSpec(num_docs=args.num_docs, dim=args.dim, seed=args.seed))
        has_pass = True
    rates = _floats(args.pass_rates)
    if not has_pass and any(r != 1.0 for r in rates):
        raise CommandError(f"pass rates below 1 need a '{bench.PASS_CLAUSE}' clause in the index")
    if any(not 0 < r <= 1 for r in rates):
        raise CommandError("pass rates must lie in (0, 1]")
    sizes = _ints(args.batch_sizes)
    if not sizes or min(sizes) < 1:
        raise CommandError("batch sizes must be positive")
    rows = bench.bench_batches(
        index, sizes, rates, args.k, args.queries, args.quant_enabled, args.repeats, args.seed, use_pass_clause=has_pass
    )
    for row in rows:
        emit({"event": "bench", **row})
    plotting.write_table(out / "batch_bench.tsv", rows)
    plotting.plot_latency_vs_pass_rate(rows, out / "latency_vs_pass_rate.png")
    plotting.plot_batch_throughput(rows, out / "batch_throughput.png")
    if args.topk_n:
        top = bench.bench_topk(args.topk_n, args.topk_k, seed=args.seed)
        for row in top:
            emit({"event": "topk", **row})
        plotting.write_table(out / "topk_bench.tsv", top)
        plotting.plot_topk_speedup(top, out / "topk_bench.png")
    if args.layout:
        layout = bench.bench_layout(seed=args.seed)
        for row in layout:
            emit({"event": "layout", **row})
        plotting.write_table(out / "layout_bench.tsv", layout)
    return 0


# -- synth --------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _out_dir(args)
    if args.kind == "index":
        spec = bench.SyntheticSpec(num_docs=args.num_docs, dim=args.dim, seed=args.seed)
        schema = bench.synthetic_schema(spec)
        corpus.write_documents(out / "docs.jsonl", bench.synthetic_documents(spec), schema)
        (out / "schema.json").write_text(json.dumps(schema.to_dict()))
        emit({"event": "synth", "kind": "index", "docs": out / "docs.jsonl", "schema": out / "schema.json"})
    elif args.kind == "links":
        planted = links.make_planted_corpus(seed=args.seed)
        links.write_pairs(out / "pairs.jsonl", planted.pairs)
        links.write_templates(out / "templates.json", planted.templates)
        (out / "planted.json").write_text(json.dumps([links.link_to_record(links.ComplexLink(p)) for p in planted.planted]))
        emit({"event": "synth", "kind": "links", "pairs": len(planted.pairs), "planted": len(planted.planted)})
    else:
        data, info = two_tower.make_clustered_data(args.num_pairs, seed=args.seed)
        two_tower.write_pair_file(out / "pairs.jsonl", info["seekerTokens"], info["jobTokens"], data.job_rows)
        emit({"event": "synth", "kind": "pairs", "pairs": len(data)})
    return 0


# -- parser -------------------------------------------------------------------


def _service_flags(p: argparse.ArgumentParser) -> None:
    d = ServiceConfig()
    p.add_argument("--index", required=False, help="index file written by build")
    p.add_argument("--max-batch", type=int, default=d.max_batch)
    p.add_argument("--default-k", type=int, default=d.default_k)
    p.add_argument("--num-bits", type=int, default=d.num_bits, help="expected signature width of the index")
    p.add_argument("--quant-k-multiplier", type=int, default=d.quant_k_multiplier)
    p.add_argument("--granularity", type=int, default=d.granularity)
    p.add_argument("--quant-enabled", action=argparse.BooleanOptionalAction, default=d.quant_enabled)
    p.add_argument("--host", default=d.host)
    p.add_argument("--port", type=int, default=d.port)
    p.add_argument("--workers", type=int, default=d.workers)


def _train_flags(p: argparse.ArgumentParser) -> None:
    d = two_tower.TrainConfig()
    p.add_argument("--pairs", help="engagement pairs JSONL; omit to use synthetic clustered data")
    p.add_argument("--synthetic", type=int, default=12000, help="synthetic pair count when --pairs is absent")
    p.add_argument("--buckets", type=int, default=d.tower.buckets)
    p.add_argument("--seed", type=int, default=d.seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybrid-retrieval", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of option defaults for the command")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build an index file from a JSONL ingest file")
    p.add_argument("--ingest", required=True)
    p.add_argument("--schema", required=True, help='JSON {"clauses": [...], "dim": D, "maxNumAttr": M}')
    p.add_argument("--out", required=True)
    p.add_argument("--num-bits", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("serve", help="serve JSON queries over HTTP")
    _service_flags(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("query", help="answer one JSON request without a server")
    _service_flags(p)
    p.add_argument("--request", required=True, help="JSON text, or @file")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("links", help="learn targeting links and export the serving graph")
    p.add_argument("--pairs", required=True)
    p.add_argument("--templates", required=True)
    p.add_argument("--theta", type=int, default=5, help="liquidity: distinct jobs each seeker should reach")
    p.add_argument("--method", choices=("l1", "ratio"), default="l1")
    p.add_argument("--lam", type=float, default=1e-3)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--min-support", type=int, default=links.DEFAULT_MIN_SUPPORT)
    p.add_argument("--holdout", type=float, default=0.25, help="fraction of pairs held out for the report")
    p.add_argument("--planted", help="JSON list of known links to score recovery against")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="links_out")
    p.set_defaults(func=cmd_links)

    p = sub.add_parser("train", help="train the two-tower model with the two-stage curriculum")
    _train_flags(p)
    d = two_tower.TrainConfig()
    for name in TRAIN_FIELDS:
        if name == "seed":
            continue
        flag = "--" + name.replace("_", "-")
        p.add_argument(flag, dest=name, type=type(getattr(d, name)), default=getattr(d, name))
    p.add_argument("--hidden", type=int, default=d.tower.hidden)
    p.add_argument("--out-dim", type=int, default=d.tower.out)
    p.add_argument("--holdout", type=int, default=None, help="validation pairs (default min(2048, 20%%))")
    p.add_argument("--out-dir", default="train_out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recall@k of a saved model")
    _train_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--knn", action=argparse.BooleanOptionalAction, default=True, help="also report recall over the full inventory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency and QPS by batch size and term pass rate")
    p.add_argument("--index", help="index file; omit for a synthetic index")
    p.add_argument("--num-docs", type=int, default=10_000)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--batch-sizes", default="1,2,4,8,16")
    p.add_argument("--pass-rates", default="1.0,0.33,0.1")
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--queries", type=int, default=64)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--quant-enabled", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--topk-n", type=int, default=0, help="also time top-k selection over this many scores")
    p.add_argument("--topk-k", type=int, default=2000)
    p.add_argument("--layout", action="store_true", help="also time row- vs column-major scoring")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="bench_out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write synthetic inputs for the other commands")
    p.add_argument("kind", choices=("index", "links", "pairs"))
    p.add_argument("--num-docs", type=int, default=10_000)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--num-pairs", type=int, default=12000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="synth_out")
    p.set_defaults(func=cmd_synth)
    return parser


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(overrides, dict):
            parser.error("config file must hold a JSON object")
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        defaults = {}
        for key, value in overrides.items():
            dest = key.replace("-", "_")
            if dest not in known:
                parser.error(f"config key {key!r} is not an option of {args.command}")
            defaults[dest] = value
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if getattr(args, "index", "") is None and args.command in ("serve", "query"):
        parser.error("--index is required")
    return args


def main(argv: Sequence[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        emit({"error": str(exc), "command": args.command}, sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
