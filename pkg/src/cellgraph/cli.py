"""Batch command-line surface for the pipeline.

Subcommands: build, query, balance, split, pretrain, infer-core. Every run
writes a resolved-config JSON next to its outputs so reruns are reproducible;
commands are deterministic given identical inputs and seeds. Exit codes:
0 success, 1 runtime failure, 2 input/validation error.
"""

from __future__ import annotations

import argparse
import csv as csv_mod
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import graph_build, inference, model, retrieval, shard_store
from .errors import ConfigError, InputError

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INPUT = 2


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellgraph")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="shard an expression matrix and assemble the graph")
    p.add_argument("--matrix", required=True, help="NPY or numeric CSV expression matrix")
    p.add_argument("--attrs", required=True, help="attribute table CSV")
    p.add_argument("--mapping", required=True, help="feature/transcript/protein CSV")
    p.add_argument("--ppi", required=True, help="protein pair CSV")
    p.add_argument("--text", help="optional entity text CSV")
    p.add_argument("--shard-size", type=int, default=10_000)
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_build)

    for name, balanced in (("query", False), ("balance", True)):
        p = sub.add_parser(name, help="extract a cohort" + (" with stratified balancing" if balanced else ""))
        p.add_argument("--attrs", required=True)
        p.add_argument("--conditions", required=True, help="JSON object or @file of attribute filters")
        p.add_argument("--task", default=None)
        p.add_argument("--label-column", default=None)
        p.add_argument("--sample-ratio", type=float, default=None)
        p.add_argument("--sample-size", type=int, default=None)
        p.add_argument("--shuffle", action="store_true")
        p.add_argument("--stratified-balancing", action="store_true", default=balanced)
        p.add_argument("--task-config", help="JSON or @file with the balancing config")
        p.add_argument("--extract-mode", choices=("inference", "train"), default="inference")
        p.add_argument("--test-fraction", type=float, default=0.3)
        p.add_argument("--cap", type=float, default=0.4)
        p.add_argument("--upsample-min", type=int, default=None, help="rare-class floor")
        p.add_argument("--correction-method", choices=("none", "combat_seq"), default="none")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--output-dir", required=True)
        p.set_defaults(func=cmd_extract)

    p = sub.add_parser("split", help="donor-level train/test split")
    p.add_argument("--attrs", required=True)
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--cap", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pretrain", help="masked-edge self-supervised pretraining")
    p.add_argument("--data-dir", required=True, help="shard directory (with manifest)")
    p.add_argument("--graph", required=True, help="graph JSON from build")
    p.add_argument("--cohort", required=True, help="cohort JSON (rows) or comma list of rows")
    p.add_argument("--model-config", help="JSON or @file overriding model defaults")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("infer-core", help="train a head and extract the core subgraph")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--cohort", required=True, help="cohort JSON with rows and labels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--control-label", required=True, help="label value marking controls")
    p.add_argument("--top-nodes", type=int, default=inference.DEFAULT_TOP_NODES)
    p.add_argument("--max-leaves", type=int, default=inference.DEFAULT_MAX_LEAVES)
    p.add_argument("--head-epochs", type=int, default=150)
    p.add_argument("--head-lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_infer_core)

    return parser


def _json_arg(raw: str) -> dict:
    if raw.startswith("@"):
        raw = Path(raw[1:]).read_text(encoding="utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed JSON argument: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError("expected a JSON object")
    return doc


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _resolved_config(args: argparse.Namespace, out_dir: Path) -> None:
    doc = {k: v for k, v in vars(args).items() if k != "func"}
    _write_json(out_dir / f"{args.command.replace('-', '_')}_config.json", doc)


def _load_matrix(path: str) -> np.ndarray:
    if path.endswith(".npy"):
        return shard_store.read_npy(path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = [[float(v) for v in row] for row in csv_mod.reader(fh) if row]
    return np.asarray(rows, dtype="<f4")


def cmd_build(args) -> int:
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    matrix = _load_matrix(args.matrix)
    shard_dir = out_dir / "shards"
    manifest = shard_store.write_shards(matrix, args.shard_size, shard_dir)

    records = shard_store.load_attributes(args.attrs)
    if len(records) != manifest.num_rows:
        raise InputError(
            f"attribute table has {len(records)} rows, matrix has {manifest.num_rows}"
        )
    # rewrite shard pointers against the freshly written shards
    with open(args.attrs, "r", encoding="utf-8", newline="") as fh:
        reader = csv_mod.DictReader(fh)
        fieldnames = list(reader.fieldnames or [])
        raw_rows = list(reader)
    for i, row in enumerate(raw_rows):
        shard, local = manifest.locate(i)
        row["matrix_file_path"] = f"shards/{manifest.shard_paths[shard]}"
        row["matrix_row_idx"] = str(local)
    attrs_out = out_dir / "attributes.csv"
    with open(attrs_out, "w", encoding="utf-8", newline="") as fh:
        writer = csv_mod.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(raw_rows)

    mapping = graph_build.load_mapping_csv(args.mapping)
    ppi = graph_build.load_ppi_csv(args.ppi)
    text = graph_build.load_text_csv(args.text) if args.text else None
    graph = graph_build.build_graph(mapping, ppi, text)
    graph_build.save_graph(graph, out_dir / "graph.json")

    problems = shard_store.validate_pointers(
        shard_store.load_attributes(attrs_out), out_dir
    )
    report = {
        "num_rows": manifest.num_rows,
        "num_cols": manifest.num_cols,
        "num_shards": manifest.num_shards,
        "num_entities": graph.num_entities,
        "num_internal_edges": len(graph.edges.internal),
        "num_ppi_edges": len(graph.edges.ppi),
        "pointer_problems": problems,
    }
    _write_json(out_dir / "validation.json", report)
    _resolved_config(args, out_dir)
    if problems:
        raise InputError(f"{len(problems)} dangling attribute pointers; see validation.json")
    return EXIT_OK


def _subsample(rows: list[int], labels: list[str], args, rng) -> tuple[list[int], list[str]]:
    if args.sample_ratio is not None and args.sample_size is not None:
        raise ConfigError("sample_ratio and sample_size are mutually exclusive")
    n = len(rows)
    if args.sample_ratio is not None:
        if not 0.0 < args.sample_ratio <= 1.0:
            raise ConfigError(f"sample_ratio must be in (0, 1], got {args.sample_ratio}")
        keep = round(args.sample_ratio * n)
    elif args.sample_size is not None:
        if args.sample_size < 1:
            raise ConfigError(f"sample_size must be >= 1, got {args.sample_size}")
        keep = min(args.sample_size, n)
    else:
        return rows, labels
    idx = sorted(rng.sample(range(n), keep))
    return [rows[i] for i in idx], [labels[i] for i in idx]


def cmd_extract(args) -> int:
    import random

    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = shard_store.load_attributes(args.attrs)
    query = retrieval.query_from_json(_json_arg(args.conditions))
    label_column = args.label_column or args.task
    rng = random.Random(args.seed)

    strata = None
    if args.stratified_balancing:
        if not args.task_config:
            raise ConfigError("stratified balancing requires --task-config")
        cfg = retrieval.task_config_from_json(_json_arg(args.task_config))
        cohort = retrieval.phase2_balance(records, query, cfg)
        rows, labels = cohort.rows, cohort.labels
        strata = {
            "|".join(k): {"cases": c, "controls": n}
            for k, (c, n) in sorted(cohort.strata.items())
        }
    else:
        rows = retrieval.phase1_extract(records, query)
        labels = [
            retrieval.attribute_value(records[i], label_column) if label_column else ""
            for i in rows
        ]

    # subsample after balancing so strata stay representative
    rows, labels = _subsample(rows, labels, args, rng)
    if args.upsample_min:
        rows, labels = retrieval.upsample_rare(rows, labels, args.upsample_min, args.seed)
    if args.shuffle:
        order = list(range(len(rows)))
        rng.shuffle(order)
        rows = [rows[i] for i in order]
        labels = [labels[i] for i in order]

    if not rows:
        print("warning: empty result set", file=sys.stderr)

    doc: dict
    if args.extract_mode == "train":
        sub_records = [records[i] for i in rows]
        train_idx, test_idx = retrieval.donor_split(
            sub_records, args.test_fraction, args.cap, args.seed
        )
        doc = {
            "train": {"rows": [rows[i] for i in train_idx],
                      "labels": [labels[i] for i in train_idx]},
            "test": {"rows": [rows[i] for i in test_idx],
                     "labels": [labels[i] for i in test_idx]},
        }
    else:
        doc = {"rows": rows, "labels": labels}
    if strata is not None:
        doc["strata"] = strata
    if args.correction_method != "none":
        # recorded for provenance; batch correction itself is out of scope
        doc["correction_method"] = args.correction_method
    _write_json(out_dir / "cohort.json", doc)
    _resolved_config(args, out_dir)
    return EXIT_OK


def cmd_split(args) -> int:
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = shard_store.load_attributes(args.attrs)
    train_idx, test_idx = retrieval.donor_split(
        records, args.test_fraction, args.cap, args.seed
    )
    _write_json(out_dir / "split.json", {"train": train_idx, "test": test_idx})
    _resolved_config(args, out_dir)
    return EXIT_OK


def _load_cohort_rows(raw: str) -> tuple[list[int], list[str]]:
    if Path(raw).is_file():
        doc = json.loads(Path(raw).read_text(encoding="utf-8"))
        if "train" in doc:
            doc = doc["train"]
        return list(doc["rows"]), list(doc.get("labels", []))
    try:
        return [int(v) for v in raw.split(",") if v.strip()], []
    except ValueError as exc:
        raise InputError(f"cannot parse cohort rows from {raw!r}: {exc}") from exc


def _load_features(data_dir: str, graph, rows: list[int]) -> np.ndarray:
    manifest = shard_store.ShardManifest.load(data_dir)
    block = shard_store.read_rows(manifest, rows, data_dir)
    return graph_build.expand_features(block, graph.entities)


def cmd_pretrain(args) -> int:
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    graph = graph_build.load_graph(args.graph)
    rows, _ = _load_cohort_rows(args.cohort)
    if not rows:
        raise InputError("pretraining cohort is empty")
    features = _load_features(args.data_dir, graph, rows)

    overrides = _json_arg(args.model_config) if args.model_config else {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        cfg = model.ModelConfig(**overrides)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from exc

    trained, history = model.train(graph, features, cfg)
    model.save_checkpoint(out_dir / "checkpoint.bin", trained)
    model.write_history(out_dir / "history.csv", history)
    _resolved_config(args, out_dir)
    return EXIT_OK


def cmd_infer_core(args) -> int:
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    graph = graph_build.load_graph(args.graph)
    rows, labels = _load_cohort_rows(args.cohort)
    if not rows:
        raise InputError("cohort is empty")
    if len(labels) != len(rows):
        raise InputError("cohort must carry one label per row")
    manifest = shard_store.ShardManifest.load(args.data_dir)
    block = shard_store.read_rows(manifest, rows, args.data_dir)
    features = graph_build.expand_features(block, graph.entities)

    pretrained = model.load_checkpoint(args.checkpoint, graph)
    classes = sorted(set(labels))
    if args.control_label not in classes:
        raise InputError(
            f"control label {args.control_label!r} absent from cohort labels {classes}"
        )
    if len(classes) < 2:
        raise InputError("cohort has a single label class; nothing to contrast")
    class_idx = {c: i for i, c in enumerate(classes)}
    head = inference.DownstreamHead(pretrained.cfg, graph, len(classes))
    inference.train_classifier(
        pretrained, head, features, [class_idx[l] for l in labels],
        epochs=args.head_epochs, learning_rate=args.head_lr, seed=args.seed,
    )

    import torch

    with torch.no_grad():
        z = head.embed(inference.pretrained_states(pretrained, features)).numpy()
    affinities = inference.attention_affinity(
        z, graph, head.query.weight.detach().numpy(), head.key.weight.detach().numpy()
    )
    gene_of, transcript_genes = graph_build.entity_gene_map(graph)
    case_mask = np.array([l != args.control_label for l in labels])
    weights, excluded = inference.aggregate_group(
        [affinities[i] for i in np.flatnonzero(case_mask)], graph, gene_of
    )
    scores = inference.node_scores(
        weights, np.asarray(block.values, dtype=np.float64), transcript_genes, case_mask
    )
    core = inference.extract_core(scores, weights, args.top_nodes, args.max_leaves)

    inference.core_to_tsv(core, out_dir / "core_edges.tsv")
    inference.core_to_dot(core, out_dir / "core.dot")
    inference.scores_to_csv(scores, out_dir / "node_scores.csv")
    _write_json(
        out_dir / "core_summary.json",
        {
            "nodes": len(core.nodes),
            "edges": len(core.edges),
            "significant_nodes": sorted(g for g, f in core.flags.items() if f),
            "entities_without_gene": excluded,
        },
    )
    _resolved_config(args, out_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
