"""Command-line entry point: ``lookalike <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error,
4 offline stage completed but skipped customers with zero-norm embeddings.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .ann_index import INDEX_MAGIC, EMBED_MAGIC, load_embeddings, load_index
from .config import ConfigError, format_defaults, load_config, resolve_path
from .customer_data import (
    DataError,
    SynthConfig,
    TimeWindow,
    generate_synthetic,
    load_customers,
    n_categories_of,
    save_customers,
    synthetic_word_vectors,
)
from .features import FeatureSchema, infer_schema, save_word_vectors
from .model import MODEL_MAGIC, ModelBundle, TrainConfig, config_dict, load_model, save_model, train
from .pipeline import (
    DEFAULT_VARIANTS,
    ExpansionEngine,
    ExpansionRequest,
    ExpansionResult,
    expand,
    format_report,
    load_table,
    make_context,
    offline_stage,
    prepare_pairs,
    run_variants,
    summarize_runs,
)
from .similarity import SimilarityMetric

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL, EXIT_SKIPS = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="TOML config file")
    p.add_argument("--seed", type=int, default=d if suppress else 0, help="RNG seed (u64)")
    p.add_argument("--threads", type=int, default=d if suppress else 1, help="worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lookalike", description="Lookalike audience expansion")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a seeded synthetic universe")
    p.add_argument("--out-dir")
    p.add_argument("--customers", type=int)
    p.add_argument("--categories", type=int)
    p.add_argument("--archetypes", type=int)
    p.add_argument("--days", help="START:END epoch-day range")
    p.add_argument("--no-location-signal", action="store_true")
    p.add_argument("--word-vector-dim", type=int)

    p = sub.add_parser("train", help="train the embedding model")
    p.add_argument("--universe")
    p.add_argument("--schema")
    p.add_argument("--word-vectors")
    p.add_argument("--model", help="output model file")
    p.add_argument("--no-location", action="store_true")
    p.add_argument("--hidden-dims", type=_ints)
    p.add_argument("--embedding-dim", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--pairs", type=int)
    p.add_argument("--eval-pairs", type=int)
    p.add_argument("--metric", choices=["cosine", "jaccard", "euclidean"])
    p.add_argument("--channel", choices=["transaction", "visit", "engagement"])
    p.add_argument("--train-window")
    p.add_argument("--eval-window")

    p = sub.add_parser("offline", help="embed the universe and build the index")
    p.add_argument("--universe")
    p.add_argument("--model")
    p.add_argument("--word-vectors")
    p.add_argument("--out-dir")
    p.add_argument("--nlist", type=int)

    p = sub.add_parser("expand", help="expand a seed list into lookalikes")
    p.add_argument("--seeds", type=_ints, help="comma-separated seed ids")
    p.add_argument("--seeds-file", help="file with one seed id per line")
    p.add_argument("--index")
    p.add_argument("--embeddings")
    p.add_argument("--model")
    p.add_argument("--universe")
    p.add_argument("--word-vectors")
    p.add_argument("--output-size", type=int)
    p.add_argument("--k-per-seed", type=int)
    p.add_argument("--nprobe", type=int)
    p.add_argument("--filter", action="append", default=[], metavar="FIELD=V1,V2")
    p.add_argument("--include-seeds", action="store_true")
    p.add_argument("--format", choices=["json", "csv"])
    p.add_argument("--out", help="output file, '-' for stdout")
    p.add_argument("--timing", action="store_true", help="record elapsed_ms in metadata")

    p = sub.add_parser("evaluate", help="compare model variants by held-out MAE")
    p.add_argument("--universe")
    p.add_argument("--schema")
    p.add_argument("--word-vectors")
    p.add_argument("--seeds", type=_ints)
    p.add_argument("--epochs", type=int)
    p.add_argument("--pairs", type=int)
    p.add_argument("--eval-pairs", type=int)
    p.add_argument("--format", choices=["table", "json"], default="table")

    p = sub.add_parser("inspect", help="print the header of an artifact file")
    p.add_argument("path", nargs="?")
    p.add_argument("--defaults", action="store_true", help="print every config default")

    for name, sp in sub.choices.items():
        _add_globals(sp, suppress=True)
    return parser


def _pick(flag, cfg_value):
    return cfg_value if flag is None else flag


def _path(flag, cfg, key) -> Path:
    return Path(flag) if flag else resolve_path(cfg, key)


def _metric(args, cfg) -> SimilarityMetric:
    s = cfg["similarity"]
    return SimilarityMetric.parse(
        _pick(getattr(args, "metric", None), s["metric"]),
        _pick(getattr(args, "channel", None), s["channel"]),
    )


def _windows(args, cfg) -> tuple[TimeWindow, TimeWindow]:
    s = cfg["similarity"]
    return (
        TimeWindow.parse(_pick(getattr(args, "train_window", None), s["train_window"])),
        TimeWindow.parse(_pick(getattr(args, "eval_window", None), s["eval_window"])),
    )


def cmd_gen_data(args, cfg) -> int:
    d = cfg["data"]
    out = Path(args.out_dir) if args.out_dir else Path(cfg["paths"]["workdir"])
    synth = SynthConfig(
        n_customers=_pick(args.customers, d["customers"]),
        n_categories=_pick(args.categories, d["categories"]),
        n_archetypes=_pick(args.archetypes, d["archetypes"]),
        day_range=TimeWindow.parse(_pick(args.days, d["days"])),
        location_informative=d["location_informative"] and not args.no_location_signal,
        rng_seed=args.seed,
    )
    dim = _pick(args.word_vector_dim, d["word_vector_dim"])
    records = generate_synthetic(synth)
    table = synthetic_word_vectors(synth.n_archetypes, dim, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    paths = cfg["paths"]
    save_customers(records, out / Path(paths["universe"]).name)
    save_word_vectors(table, out / Path(paths["word_vectors"]).name)
    infer_schema(records, dim).save(out / Path(paths["schema"]).name)
    print(f"wrote {len(records)} customers to {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    t = cfg["train"]
    universe = _path(args.universe, cfg, "universe")
    records = load_customers(universe)
    n_cat = max(n_categories_of(records), cfg["data"]["categories"])
    schema = FeatureSchema.load(_path(args.schema, cfg, "schema"))
    use_location = t["location"] and not args.no_location
    table = None
    wv_path = None
    if use_location and schema.location_dim:
        wv_path = _path(args.word_vectors, cfg, "word_vectors")
        table = load_table(wv_path)
    else:
        schema = schema.without_location()
    config = TrainConfig(
        embedding_dim=_pick(args.embedding_dim, t["embedding_dim"]),
        hidden_dims=tuple(_pick(args.hidden_dims, t["hidden_dims"])),
        learning_rate=_pick(args.learning_rate, t["learning_rate"]),
        batch_size=_pick(args.batch_size, t["batch_size"]),
        epochs=_pick(args.epochs, t["epochs"]),
        rng_seed=args.seed,
    )
    metric = _metric(args, cfg)
    train_w, eval_w = _windows(args, cfg)
    split = prepare_pairs(
        records,
        metric,
        train_w,
        eval_w,
        _pick(args.pairs, t["pairs"]),
        _pick(args.eval_pairs, t["eval_pairs"]),
        args.seed,
        n_cat,
    )
    ctx = make_context(schema, records, table)
    params, report = train(records, split.train, ctx, config, split.val, split.test)
    meta = {
        "train_config": config_dict(config),
        "metric": {"kind": metric.kind.value, "channel": metric.channel},
        "word_vectors": str(Path(wv_path).resolve()) if wv_path else None,
    }
    model_path = _path(args.model, cfg, "model")
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(ModelBundle(params, ctx.schema, ctx.stats, meta), model_path)
    print(
        json.dumps(
            {
                "model": str(model_path),
                "train_loss": report.train_loss,
                "val_mae": report.val_mae,
                "initial_val_mae": report.initial_val_mae,
                "test_mae": report.test_mae,
            },
            indent=1,
        )
    )
    return EXIT_OK


def _table_for_model(model_path: Path, flag, cfg):
    """Word vectors for a location model: flag, then model metadata, then config."""
    bundle = load_model(model_path)
    if not bundle.schema.location_dim:
        return None
    if flag:
        return load_table(flag)
    recorded = bundle.meta.get("word_vectors")
    if recorded and Path(recorded).exists():
        return load_table(recorded)
    return load_table(resolve_path(cfg, "word_vectors"))


def cmd_offline(args, cfg) -> int:
    model_path = _path(args.model, cfg, "model")
    if not model_path.exists():
        raise DataError(f"model file {model_path} not found")
    table = _table_for_model(model_path, args.word_vectors, cfg)
    records = load_customers(_path(args.universe, cfg, "universe"))
    out_dir = Path(args.out_dir) if args.out_dir else Path(cfg["paths"]["workdir"])
    ix = cfg["index"]
    art = offline_stage(
        records,
        model_path,
        out_dir,
        table=table,
        nlist=_pick(args.nlist, ix["nlist"]) or None,
        rng_seed=args.seed,
        threads=args.threads,
        kmeans_iters=ix["kmeans_iters"],
        embeddings_name=Path(cfg["paths"]["embeddings"]).name,
        index_name=Path(cfg["paths"]["index"]).name,
    )
    print(
        json.dumps(
            {
                "embeddings": str(art.embeddings_path),
                "index": str(art.index_path),
                "nlist": art.nlist,
                "indexed": len(records) - len(art.skipped),
                "skipped": len(art.skipped),
            },
            indent=1,
        )
    )
    if art.skipped:
        print(f"skipped {len(art.skipped)} zero-norm customers; see skipped.txt", file=sys.stderr)
        return EXIT_SKIPS
    return EXIT_OK


def _parse_filters(items) -> list[tuple[str, tuple[str, ...]]]:
    out = []
    for item in items:
        name, sep, values = item.partition("=")
        if not sep or not name:
            raise UsageError(f"bad --filter {item!r}; expected FIELD=V1,V2")
        out.append((name, tuple(v for v in values.split(",") if v)))
    return out


def cmd_expand(args, cfg) -> int:
    e = cfg["expand"]
    index_path = _path(args.index, cfg, "index")
    emb_path = _path(args.embeddings, cfg, "embeddings")
    model_path = _path(args.model, cfg, "model")
    universe_path = _path(args.universe, cfg, "universe")

    index = load_index(index_path)
    embeddings = load_embeddings(emb_path) if emb_path.exists() else None
    if args.seeds:
        seeds = args.seeds
    elif args.seeds_file:
        seeds = _ints(Path(args.seeds_file).read_text())
    elif embeddings is not None:
        seeds = [int(c) for c in embeddings.ids[: e["default_seed_count"]].tolist()]
    else:
        raise UsageError("no seeds given (use --seeds or --seeds-file)")
    filters = _parse_filters(args.filter)

    known = set(embeddings.ids.tolist()) if embeddings is not None else set()
    need_records = bool(filters) or any(s not in known for s in seeds)
    records = load_customers(universe_path) if need_records and universe_path.exists() else None
    bundle_path = model_path if model_path.exists() else None
    table = None
    if bundle_path is not None and any(s not in known for s in seeds):
        table = _table_for_model(bundle_path, args.word_vectors, cfg)
    engine = ExpansionEngine(
        index,
        embeddings,
        load_model(bundle_path) if bundle_path else None,
        records,
        table,
        model_path=str(model_path),
        index_path=str(index_path),
    )
    k_per_seed = _pick(args.k_per_seed, e["k_per_seed"]) or None
    request = ExpansionRequest(
        seed_ids=seeds,
        output_size=_pick(args.output_size, e["output_size"]),
        k_per_seed=k_per_seed,
        exclude_seeds=e["exclude_seeds"] and not args.include_seeds,
        attribute_filters=filters,
    )
    nprobe = _pick(args.nprobe, cfg["index"]["nprobe"]) or None
    result = expand(request, engine, nprobe, args.threads, timing=args.timing)
    fmt = _pick(args.format, e["format"])
    text = result.to_json() if fmt == "json" else result.to_csv()
    out = args.out if args.out else str(resolve_path(cfg, "result"))
    if out == "-":
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
        print(f"wrote {len(result.entries)} lookalikes to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    t = cfg["train"]
    records = load_customers(_path(args.universe, cfg, "universe"))
    n_cat = max(n_categories_of(records), cfg["data"]["categories"])
    schema = FeatureSchema.load(_path(args.schema, cfg, "schema"))
    table = load_table(_path(args.word_vectors, cfg, "word_vectors"))
    train_w, eval_w = _windows(args, cfg)
    base = TrainConfig(
        embedding_dim=t["embedding_dim"],
        learning_rate=t["learning_rate"],
        batch_size=t["batch_size"],
        epochs=_pick(args.epochs, t["epochs"]),
    )
    runs = run_variants(
        records,
        schema,
        table,
        _metric(args, cfg),
        train_w,
        eval_w,
        n_cat,
        seeds=_pick(args.seeds, cfg["evaluate"]["seeds"]),
        variants=DEFAULT_VARIANTS,
        n_pairs=_pick(args.pairs, t["pairs"]),
        n_eval=_pick(args.eval_pairs, t["eval_pairs"]),
        base_config=base,
    )
    rows = summarize_runs(runs)
    print(json.dumps(rows, indent=1) if args.format == "json" else format_report(rows))
    return EXIT_OK


def describe(path: Path) -> dict:
    """Header summary of any artifact this package writes."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MODEL_MAGIC:
        b = load_model(path)
        return {
            "kind": "model",
            "layers": [list(W.shape) for W, _ in b.params.layers],
            "embedding_dim": b.params.embedding_dim,
            "schema": b.schema.to_dict(),
            "meta": b.meta,
        }
    if head == EMBED_MAGIC:
        m = load_embeddings(path)
        return {"kind": "embeddings", "count": len(m), "dim": m.dim}
    if head == INDEX_MAGIC:
        ix = load_index(path)
        sizes = ix.list_sizes()
        return {
            "kind": "index",
            "dim": ix.dim,
            "nlist": ix.nlist,
            "count": len(ix),
            "list_size_min": int(sizes.min()),
            "list_size_max": int(sizes.max()),
        }
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError(f"{path}: unrecognized file (magic {head!r})") from None
    result = ExpansionResult.from_dict(obj)
    return {
        "kind": "expansion_result",
        "entries": len(result.entries),
        "top": [e.__dict__ for e in result.entries[:5]],
        "metadata": result.metadata,
    }


def cmd_inspect(args, cfg) -> int:
    if args.defaults:
        print(format_defaults(), end="")
        return EXIT_OK
    if not args.path:
        raise UsageError("inspect needs a path or --defaults")
    print(json.dumps(describe(Path(args.path)), indent=1))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "offline": cmd_offline,
    "expand": cmd_expand,
    "evaluate": cmd_evaluate,
    "inspect": cmd_inspect,
}


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if not 0 <= args.seed < 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
