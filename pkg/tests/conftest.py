"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from cellgraph.graph_build import SignalingGraph, build_graph
from cellgraph.shard_store import AttributeRecord


def make_record(**overrides) -> AttributeRecord:
    base = dict(
        dataset_id="ds0",
        suspension_type="cell",
        tissue_general="blood",
        matrix_file_path="m.npy",
        matrix_row_idx=0,
        donor_id="donor0",
        disease_BMG_name="healthy",
        sex_normalized="female",
    )
    base.update(overrides)
    return AttributeRecord(**base)


def chain_graph(n: int = 6, with_text: bool = True) -> SignalingGraph:
    """n transcript/protein pairs, proteins wired in a directed chain."""
    mapping = [(f"f{i}", f"t{i}", f"p{i}") for i in range(n)]
    ppi = [(f"p{i}", f"p{i + 1}") for i in range(n - 1)]
    text = (
        {f"p{i}": (f"prot{i}", f"desc{i}", "MK" * (i + 1)) for i in range(n)}
        if with_text
        else None
    )
    return build_graph(mapping, ppi, text)


def planted_two_block(
    seed: int = 42,
    n_proteins: int = 200,
    p_within: float = 0.15,
    p_cross: float = 0.01,
    n_factors: int = 8,
    noise: float = 0.05,
    scale: float = 2.0,
) -> tuple[SignalingGraph, np.ndarray]:
    """Two-community random graph plus edge-informative node features.

    Features are noisy low-rank spectral factors of the full adjacency
    (one factor per feature row), scaled to a workable dynamic range, so a
    masked-edge objective has genuine signal to recover held-out edges.
    """
    rng = np.random.default_rng(seed)
    block = np.arange(n_proteins) % 2
    mapping = [(f"f{i}", f"t{i}", f"p{i}") for i in range(n_proteins)]
    adj = np.zeros((n_proteins, n_proteins))
    ppi = []
    for i in range(n_proteins):
        for j in range(i + 1, n_proteins):
            p = p_within if block[i] == block[j] else p_cross
            if rng.random() < p:
                ppi.append((f"p{i}", f"p{j}"))
                adj[i, j] = adj[j, i] = 1.0
    graph = build_graph(mapping, ppi, None)
    evals, evecs = np.linalg.eigh(adj)
    top = np.argsort(-evals)[:n_factors]
    factors = evecs[:, top] * np.sqrt(np.abs(evals[top]))
    factors = factors / factors.std() * scale
    features = np.zeros((n_factors, graph.num_entities))
    for n in range(n_factors):
        features[n, :n_proteins] = factors[:, n] + rng.normal(
            scale=noise, size=n_proteins
        )
    return graph, features
