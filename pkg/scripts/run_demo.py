#!/usr/bin/env python3
"""End-to-end demo on synthetic data.

Generates a small expression matrix with attributes and a toy protein
interaction network, then drives the full CLI pipeline: build -> query ->
split -> pretrain -> infer-core. All outputs land under --output-dir.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from cellgraph.cli import main as cli_main
from cellgraph.shard_store import write_npy

N_DONORS = 10
ROWS_PER_DONOR = 6
N_FEATURES = 12
STAGES = ("child", "adult", "elderly")


def generate_inputs(root: Path, seed: int) -> None:
    rng = np.random.default_rng(seed)
    n_rows = N_DONORS * ROWS_PER_DONOR
    matrix = rng.poisson(5.0, size=(n_rows, N_FEATURES)).astype(np.float32) + 1.0
    # plant a disease signature on the first three features
    diseased = np.arange(n_rows) % 2 == 1
    matrix[np.ix_(diseased, range(3))] += 8.0
    write_npy(root / "matrix.npy", matrix)

    lines = [
        "dataset_id,suspension_type,tissue_general,matrix_file_path,matrix_row_idx,"
        "donor_id,disease_BMG_name,sex_normalized,development_stage_category"
    ]
    for i in range(n_rows):
        disease = "flu" if i % 2 else "healthy"
        lines.append(
            f"ds0,cell,blood,matrix.npy,{i},d{i // ROWS_PER_DONOR},{disease},"
            f"female,{STAGES[i % len(STAGES)]}"
        )
    (root / "attrs.csv").write_text("\n".join(lines) + "\n")

    mapping = ["feature_id,transcript_id,protein_id"]
    mapping += [f"f{i},t{i},p{i}" for i in range(N_FEATURES)]
    (root / "mapping.csv").write_text("\n".join(mapping) + "\n")

    ppi = ["src_protein,dst_protein"]
    ppi += [f"p{i},p{(i + 1) % N_FEATURES}" for i in range(N_FEATURES)]
    ppi += [f"p{i},p{(i + 3) % N_FEATURES}" for i in range(N_FEATURES)]
    (root / "ppi.csv").write_text("\n".join(ppi) + "\n")

    text = ["entity_id,name,description,sequence"]
    text += [f"p{i},Protein{i},demo protein,MKVL" for i in range(N_FEATURES)]
    (root / "text.csv").write_text("\n".join(text) + "\n")


def run(step: str, argv: list[str]) -> None:
    print(f"== {step}: cellgraph {' '.join(argv)}")
    code = cli_main(argv)
    if code != 0:
        sys.exit(f"{step} failed with exit code {code}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--output-dir", default="demo_out")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=50)
    args = parser.parse_args()

    root = Path(args.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    generate_inputs(root, args.seed)

    built = root / "built"
    run("build", [
        "build",
        "--matrix", str(root / "matrix.npy"),
        "--attrs", str(root / "attrs.csv"),
        "--mapping", str(root / "mapping.csv"),
        "--ppi", str(root / "ppi.csv"),
        "--text", str(root / "text.csv"),
        "--shard-size", "25",
        "--output-dir", str(built),
    ])

    cohort = root / "cohort"
    run("query", [
        "query",
        "--attrs", str(built / "attributes.csv"),
        "--conditions", '{"tissue_general": "blood"}',
        "--label-column", "disease_BMG_name",
        "--output-dir", str(cohort),
    ])

    run("split", [
        "split",
        "--attrs", str(built / "attributes.csv"),
        "--output-dir", str(root / "split"),
    ])

    pre = root / "pretrained"
    run("pretrain", [
        "pretrain",
        "--data-dir", str(built / "shards"),
        "--graph", str(built / "graph.json"),
        "--cohort", str(cohort / "cohort.json"),
        "--model-config", '{"d_prime": 8, "d": 8, "mask_ratio": 0.2}',
        "--epochs", str(args.epochs),
        "--seed", str(args.seed),
        "--output-dir", str(pre),
    ])

    core = root / "core"
    run("infer-core", [
        "infer-core",
        "--data-dir", str(built / "shards"),
        "--graph", str(built / "graph.json"),
        "--cohort", str(cohort / "cohort.json"),
        "--checkpoint", str(pre / "checkpoint.bin"),
        "--control-label", "healthy",
        "--seed", str(args.seed),
        "--output-dir", str(core),
    ])

    summary = json.loads((core / "core_summary.json").read_text())
    print("\ncore subgraph:", summary["nodes"], "nodes,", summary["edges"], "edges")
    print("significant nodes:", ", ".join(summary["significant_nodes"]) or "(none)")
    print("outputs under", root.resolve())


if __name__ == "__main__":
    main()
