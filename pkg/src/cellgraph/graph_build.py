"""Assembly of the text-omic signaling graph.

Measured expression features map onto transcript entities; each transcript's
downstream protein is attached as a virtual entity (no measured features, so
its columns stay zero). Internal edges wire transcript -> protein; PPI edges
wire protein -> protein and carry the global propagation downstream. Every
entity optionally carries a name, a free-text description, and a biochemical
sequence.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import InputError, SchemaError
from .shard_store import ExpressionBlock, read_npy


@dataclass(frozen=True)
class EntityTable:
    transcript_ids: tuple[str, ...]
    protein_ids: tuple[str, ...]
    feature_to_transcript: dict[int, int]

    @property
    def num_transcripts(self) -> int:
        return len(self.transcript_ids)

    @property
    def num_proteins(self) -> int:
        return len(self.protein_ids)

    @property
    def num_entities(self) -> int:
        return len(self.transcript_ids) + len(self.protein_ids)

    def protein_index(self, local_protein: int) -> int:
        """Entity index of a protein; proteins occupy [num_transcripts, M)."""
        return self.num_transcripts + local_protein


@dataclass(frozen=True)
class EdgeSets:
    internal: tuple[tuple[int, int], ...]  # (transcript entity, protein entity)
    ppi: tuple[tuple[int, int], ...]       # directed (protein entity, protein entity)


@dataclass(frozen=True)
class TextBundle:
    names: tuple[str, ...]
    descriptions: tuple[str, ...]
    sequences: tuple[str, ...]

    def __post_init__(self) -> None:
        if not (len(self.names) == len(self.descriptions) == len(self.sequences)):
            raise InputError("text bundle lists must share one length")


@dataclass(frozen=True)
class SignalingGraph:
    entities: EntityTable
    edges: EdgeSets
    text: TextBundle

    @property
    def num_entities(self) -> int:
        return self.entities.num_entities


def build_graph(
    mapping_rows: Sequence[tuple[str, str, str]],
    ppi_pairs: Sequence[tuple[str, str]],
    text_info: Optional[Mapping[str, tuple[str, str, str]]] = None,
) -> SignalingGraph:
    """Build the graph from (feature_id, transcript_id, protein_id) mapping rows
    and a directed protein-pair list.

    Feature column order follows mapping row order. Transcript and protein
    entities are indexed by first appearance; transcripts occupy [0, M_t),
    proteins [M_t, M). PPI pairs must reference mapped proteins, contain no
    self-loops, and no duplicate directed pairs.
    """
    transcripts: dict[str, int] = {}
    proteins: dict[str, int] = {}
    feature_to_transcript: dict[int, int] = {}
    seen_features: set[str] = set()
    internal: list[tuple[int, int]] = []
    for i, (feat, tr, pr) in enumerate(mapping_rows):
        if feat in seen_features:
            raise InputError(f"mapping row {i}: duplicate feature_id {feat!r}")
        seen_features.add(feat)
        t_idx = transcripts.setdefault(tr, len(transcripts))
        p_idx = proteins.setdefault(pr, len(proteins))
        feature_to_transcript[i] = t_idx
        internal.append((t_idx, p_idx))

    m_t = len(transcripts)
    internal_edges = tuple(dict.fromkeys((t, m_t + p) for t, p in internal))

    seen_pairs: set[tuple[int, int]] = set()
    ppi_edges: list[tuple[int, int]] = []
    for i, (src, dst) in enumerate(ppi_pairs):
        if src not in proteins:
            raise InputError(f"ppi row {i}: unknown protein {src!r}")
        if dst not in proteins:
            raise InputError(f"ppi row {i}: unknown protein {dst!r}")
        if src == dst:
            raise InputError(f"ppi row {i}: self-loop on {src!r}")
        pair = (m_t + proteins[src], m_t + proteins[dst])
        if pair in seen_pairs:
            raise InputError(f"ppi row {i}: duplicate pair ({src!r}, {dst!r})")
        seen_pairs.add(pair)
        ppi_edges.append(pair)

    entity_ids = list(transcripts) + list(proteins)
    text_info = text_info or {}
    names, descs, seqs = [], [], []
    for eid in entity_ids:
        name, desc, seq = text_info.get(eid, ("", "", ""))
        names.append(name)
        descs.append(desc)
        seqs.append(seq)

    return SignalingGraph(
        entities=EntityTable(tuple(transcripts), tuple(proteins), feature_to_transcript),
        edges=EdgeSets(internal_edges, tuple(ppi_edges)),
        text=TextBundle(tuple(names), tuple(descs), tuple(seqs)),
    )


def expand_features(block: ExpressionBlock, entities: EntityTable) -> np.ndarray:
    """Spread measured feature columns onto the full entity axis.

    Mapped transcript columns carry the measurements; unmapped transcripts
    and all protein columns are zero.
    """
    values = np.asarray(block.values)
    if values.shape[1] != len(entities.feature_to_transcript):
        raise InputError(
            f"block has {values.shape[1]} feature columns, "
            f"graph maps {len(entities.feature_to_transcript)}"
        )
    out = np.zeros((values.shape[0], entities.num_entities), dtype=values.dtype)
    for f, t in entities.feature_to_transcript.items():
        out[:, t] += values[:, f]
    return out


def pseudo_text_embed(
    text: TextBundle, dim: int, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic stand-in embeddings for the three text fields.

    Each non-empty string hashes (with the seed and field kind) to a unit-norm
    Gaussian vector; identical strings give identical rows and empty strings
    give zero rows. A drop-in replacement for externally computed language or
    sequence model embeddings (see load_embedding_npy).
    """
    if dim < 1:
        raise InputError(f"embedding dim must be >= 1, got {dim}")

    def embed(kind: str, strings: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(strings), dim))
        cache: dict[str, np.ndarray] = {}
        for i, s in enumerate(strings):
            if not s:
                continue
            if s not in cache:
                digest = hashlib.sha256(f"{seed}|{kind}|{s}".encode()).digest()
                rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
                v = rng.standard_normal(dim)
                cache[s] = v / np.linalg.norm(v)
            out[i] = cache[s]
        return out

    return (
        embed("name", text.names),
        embed("description", text.descriptions),
        embed("sequence", text.sequences),
    )


def load_embedding_npy(path: Path | str, num_entities: int) -> np.ndarray:
    """Load a precomputed embedding matrix (row order = entity order)."""
    emb = read_npy(path)
    if emb.ndim != 2 or emb.shape[0] != num_entities:
        raise InputError(
            f"{path}: expected a ({num_entities}, dim) embedding matrix, "
            f"got shape {emb.shape}"
        )
    return np.asarray(emb, dtype=np.float64)


def save_graph(graph: SignalingGraph, path: Path | str) -> None:
    doc = {
        "transcript_ids": list(graph.entities.transcript_ids),
        "protein_ids": list(graph.entities.protein_ids),
        "feature_to_transcript": {
            str(f): t for f, t in sorted(graph.entities.feature_to_transcript.items())
        },
        "internal": [list(e) for e in graph.edges.internal],
        "ppi": [list(e) for e in graph.edges.ppi],
        "names": list(graph.text.names),
        "descriptions": list(graph.text.descriptions),
        "sequences": list(graph.text.sequences),
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_graph(path: Path | str) -> SignalingGraph:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read graph file {path}: {exc}") from exc
    return SignalingGraph(
        entities=EntityTable(
            tuple(doc["transcript_ids"]),
            tuple(doc["protein_ids"]),
            {int(f): t for f, t in doc["feature_to_transcript"].items()},
        ),
        edges=EdgeSets(
            tuple(tuple(e) for e in doc["internal"]),
            tuple(tuple(e) for e in doc["ppi"]),
        ),
        text=TextBundle(
            tuple(doc["names"]), tuple(doc["descriptions"]), tuple(doc["sequences"])
        ),
    )


def entity_gene_map(graph: SignalingGraph) -> tuple[dict[int, str], list[str]]:
    """Gene labels for interpretation: a transcript's gene is its own id, a
    protein inherits the gene of its first internal-edge transcript.

    Returns (entity index -> gene, per-feature-column gene labels).
    """
    gene_of: dict[int, str] = {}
    for t_idx, tid in enumerate(graph.entities.transcript_ids):
        gene_of[t_idx] = tid
    for t, p in graph.edges.internal:
        if p not in gene_of:
            gene_of[p] = graph.entities.transcript_ids[t]
    transcript_genes = [
        graph.entities.transcript_ids[graph.entities.feature_to_transcript[f]]
        for f in sorted(graph.entities.feature_to_transcript)
    ]
    return gene_of, transcript_genes


def load_mapping_csv(path: Path | str) -> list[tuple[str, str, str]]:
    return _load_csv(path, ("feature_id", "transcript_id", "protein_id"))


def load_ppi_csv(path: Path | str) -> list[tuple[str, str]]:
    return _load_csv(path, ("src_protein", "dst_protein"))


def load_text_csv(path: Path | str) -> dict[str, tuple[str, str, str]]:
    rows = _load_csv(path, ("entity_id", "name", "description", "sequence"))
    return {r[0]: (r[1], r[2], r[3]) for r in rows}


def _load_csv(path: Path | str, columns: tuple[str, ...]) -> list[tuple]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty CSV")
        missing = [c for c in columns if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        return [tuple((row[c] or "") for c in columns) for row in reader]
