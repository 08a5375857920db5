"""Downstream classification and interpretable core-signaling extraction.

A small decoder stack on top of the pretrained encoder predicts per-sample
classes. For interpretation, scaled dot-product attention between entity
embeddings is restricted to PPI topology, aggregated to undirected gene-pair
weights, combined with group-averaged expression into node importance scores,
tested gene-by-gene with a two-sided Mann-Whitney U, and reduced to a compact
connected subgraph by top-rank selection and star-leaf pruning.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import InputError
from .graph_build import SignalingGraph, pseudo_text_embed
from .model import ModelConfig, PretrainModel
from .stats import mann_whitney_u

DEFAULT_TOP_NODES = 120   # retained importance-ranked nodes
DEFAULT_MAX_LEAVES = 3    # leaves kept per hub when pruning
SIGNIFICANCE_LEVEL = 0.05


@dataclass
class NodeScores:
    genes: list[str]
    attention: np.ndarray
    expression: np.ndarray
    importance: np.ndarray
    p_value: np.ndarray


@dataclass
class CoreSubgraph:
    nodes: list[str]
    edges: list[tuple[str, str, float]]
    flags: dict[str, bool]  # per-node significance (p < 0.05)


class DownstreamHead(nn.Module):
    """Downstream copies of the encoders and propagation layers plus a linear
    classifier over mean-pooled entity states. The final propagation layer
    aggregates with learned query/key attention restricted to PPI edges; the
    same maps drive attention_affinity."""

    def __init__(
        self,
        cfg: ModelConfig,
        graph: SignalingGraph,
        num_classes: int,
        text_embeddings: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        if num_classes < 2:
            raise InputError(f"need at least 2 classes, got {num_classes}")
        self.cfg = cfg
        self.graph = graph
        self.num_classes = num_classes
        d_p, d = cfg.d_prime, cfg.d
        if text_embeddings is None:
            text_embeddings = pseudo_text_embed(graph.text, d_p, cfg.seed)
        stacked = np.concatenate(text_embeddings, axis=1)
        self.register_buffer("text_emb", torch.as_tensor(stacked, dtype=dtype))
        from .model import _internal_adjacency  # shared layout helpers

        self.register_buffer(
            "adj_internal", _internal_adjacency(graph, cfg.internal_undirected, dtype)
        )
        self.omic_enc = nn.Linear(d, d_p, dtype=dtype)
        self.cross_enc = nn.Linear(4 * d_p, d_p, dtype=dtype)
        self.internal_self = nn.Linear(d_p, d_p, dtype=dtype)
        self.internal_nbr = nn.Linear(d_p, d_p, bias=False, dtype=dtype)
        self.bridge = nn.Linear(d_p, d, dtype=dtype)
        self.query = nn.Linear(d, d, bias=False, dtype=dtype)
        self.key = nn.Linear(d, d, bias=False, dtype=dtype)
        self.att_self = nn.Linear(d, d, dtype=dtype)
        self.classifier = nn.Linear(d, num_classes, dtype=dtype)
        src = torch.as_tensor([e[0] for e in graph.edges.ppi], dtype=torch.long)
        dst = torch.as_tensor([e[1] for e in graph.edges.ppi], dtype=torch.long)
        self.register_buffer("ppi_src", src)
        self.register_buffer("ppi_dst", dst)

    def embed(self, h_pre: torch.Tensor) -> torch.Tensor:
        """Latent entity embeddings Z for a batch of pretrained states."""
        text = self.text_emb.expand(h_pre.shape[0], -1, -1)
        h = torch.tanh(self.cross_enc(torch.cat([self.omic_enc(h_pre), text], dim=-1)))
        h = torch.tanh(self.internal_self(h) + torch.matmul(self.adj_internal, self.internal_nbr(h)))
        z0 = self.bridge(h)
        att = self._edge_attention(z0)  # N x |E_ppi|
        agg = torch.zeros_like(z0)
        agg.index_add_(
            1,
            self.ppi_src,
            att.unsqueeze(-1) * z0[:, self.ppi_dst, :],
        )
        return torch.tanh(self.att_self(z0) + agg)

    def _edge_attention(self, z: torch.Tensor) -> torch.Tensor:
        q = self.query(z)
        k = self.key(z)
        scores = (q[:, self.ppi_src, :] * k[:, self.ppi_dst, :]).sum(-1) / np.sqrt(self.cfg.d)
        # per-source softmax over outgoing PPI edges
        exp = torch.exp(scores - scores.max(dim=1, keepdim=True).values)
        denom = torch.zeros((z.shape[0], z.shape[1]), dtype=z.dtype, device=z.device)
        denom.index_add_(1, self.ppi_src, exp)
        return exp / denom[:, self.ppi_src].clamp(min=1e-30)

    def forward(self, h_pre: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.embed(h_pre).mean(dim=1))


def pretrained_states(
    pretrained: PretrainModel, features: np.ndarray
) -> torch.Tensor:
    """Run the frozen pretrained encoder over the full (unmasked) PPI graph."""
    x = torch.as_tensor(np.asarray(features), dtype=pretrained.text_emb.dtype)
    adj = pretrained.visible_adjacency(pretrained.graph.edges.ppi)
    with torch.no_grad():
        return pretrained(x, adj)


def classify(
    features: np.ndarray,
    pretrained: PretrainModel,
    head: DownstreamHead,
) -> np.ndarray:
    """Class probabilities, rows summing to 1."""
    h_pre = pretrained_states(pretrained, features)
    with torch.no_grad():
        return torch.softmax(head(h_pre), dim=-1).numpy()


def train_classifier(
    pretrained: PretrainModel,
    head: DownstreamHead,
    features: np.ndarray,
    labels: Sequence[int],
    epochs: int = 200,
    learning_rate: float = 1e-2,
    seed: int = 0,
) -> list[float]:
    """Cross-entropy training of the downstream head (pretrained encoder
    frozen). Returns the per-epoch loss history."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= head.num_classes:
        raise InputError(
            f"labels must lie in [0, {head.num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    torch.set_num_threads(1)
    torch.manual_seed(seed)
    h_pre = pretrained_states(pretrained, features)
    y = torch.as_tensor(labels, dtype=torch.long)
    opt = torch.optim.Adam(head.parameters(), lr=learning_rate)
    loss_fn = nn.CrossEntropyLoss()
    history = []
    for _ in range(epochs):
        opt.zero_grad()
        loss = loss_fn(head(h_pre), y)
        loss.backward()
        opt.step()
        history.append(float(loss.item()))
    return history


def attention_affinity(
    z: np.ndarray,
    graph: SignalingGraph,
    w_query: np.ndarray,
    w_key: np.ndarray,
) -> np.ndarray:
    """Scaled dot-product affinities restricted to PPI pairs.

    ``z`` is N x M x d (or M x d for one sample). Scores (z_i W_q).(z_j W_k)
    / sqrt(d) are kept only at directed PPI edges and normalized per source
    over its outgoing edges. Returns N x |E_ppi| weights aligned to PPI edge
    order.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 2:
        z = z[None]
    d = z.shape[-1]
    src = np.array([e[0] for e in graph.edges.ppi])
    dst = np.array([e[1] for e in graph.edges.ppi])
    q = z @ np.asarray(w_query, dtype=np.float64).T
    k = z @ np.asarray(w_key, dtype=np.float64).T
    scores = np.einsum("ned,ned->ne", q[:, src, :], k[:, dst, :]) / np.sqrt(d)
    out = np.zeros_like(scores)
    for i in np.unique(src):
        cols = np.flatnonzero(src == i)
        s = scores[:, cols]
        e = np.exp(s - s.max(axis=1, keepdims=True))
        out[:, cols] = e / e.sum(axis=1, keepdims=True)
    return out


def aggregate_group(
    samples: Sequence[np.ndarray],
    graph: SignalingGraph,
    gene_of: Mapping[int, str],
) -> tuple[dict[tuple[str, str], float], int]:
    """Collapse per-sample directed PPI edge weights to summed undirected
    gene-pair weights.

    Per sample, weights with the same (source gene, target gene) are summed,
    reciprocal directions averaged; across samples identical gene pairs are
    summed. Entities without a gene mapping are excluded and counted.
    """
    edges = graph.edges.ppi
    excluded = set()
    total: dict[tuple[str, str], float] = {}
    for weights in samples:
        weights = np.asarray(weights).reshape(-1)
        if weights.shape[0] != len(edges):
            raise InputError(
                f"sample has {weights.shape[0]} edge weights, graph has {len(edges)}"
            )
        directed: dict[tuple[str, str], float] = {}
        for (i, j), w in zip(edges, weights):
            if i not in gene_of or j not in gene_of:
                excluded.update(e for e in (i, j) if e not in gene_of)
                continue
            key = (gene_of[i], gene_of[j])
            if key[0] == key[1]:
                continue
            directed[key] = directed.get(key, 0.0) + float(w)
        seen = set()
        for (g1, g2), w in directed.items():
            if (g1, g2) in seen:
                continue
            seen.add((g1, g2))
            seen.add((g2, g1))
            und = (w + directed.get((g2, g1), 0.0)) / 2.0
            key = (g1, g2) if g1 <= g2 else (g2, g1)
            total[key] = total.get(key, 0.0) + und
    return total, len(excluded)


def node_scores(
    weights: Mapping[tuple[str, str], float],
    expression: np.ndarray,
    transcript_genes: Sequence[str],
    case_mask: np.ndarray,
    score_group: str = "case",
) -> NodeScores:
    """Per-gene attention, expression, importance, and Mann-Whitney p-value.

    ``expression`` is samples x transcripts for the whole cohort; columns are
    min-max normalized over the cohort, each gene keeps its transcript with
    the highest mean normalized value, and the group average (case or
    control, per ``score_group``) multiplies the gene's mean incident edge
    weight to give importance.
    """
    case_mask = np.asarray(case_mask, dtype=bool)
    expression = np.asarray(expression, dtype=np.float64)
    if expression.shape[0] != case_mask.shape[0]:
        raise InputError("case_mask must align with expression rows")
    if not case_mask.any() or case_mask.all():
        raise InputError("both case and control groups must be non-empty")
    if score_group not in ("case", "control"):
        raise InputError(f"score_group must be 'case' or 'control', got {score_group!r}")

    lo = expression.min(axis=0)
    span = expression.max(axis=0) - lo
    span[span == 0] = 1.0
    normed = (expression - lo) / span

    genes = sorted({g for pair in weights for g in pair} | set(transcript_genes))
    gene_cols: dict[str, int] = {}
    for g in genes:
        cols = [c for c, tg in enumerate(transcript_genes) if tg == g]
        if cols:
            gene_cols[g] = max(cols, key=lambda c: (normed[:, c].mean(), -c))

    incident: dict[str, list[float]] = {g: [] for g in genes}
    for (g1, g2), w in weights.items():
        incident[g1].append(w)
        incident[g2].append(w)

    attention = np.array([np.mean(incident[g]) if incident[g] else 0.0 for g in genes])
    expr = np.zeros(len(genes))
    p_vals = np.ones(len(genes))
    group_mask = case_mask if score_group == "case" else ~case_mask
    for gi, g in enumerate(genes):
        col = gene_cols.get(g)
        if col is None:
            continue
        values = normed[:, col]
        expr[gi] = values[group_mask].mean()
        _, p_vals[gi] = mann_whitney_u(
            values[case_mask].tolist(), values[~case_mask].tolist()
        )
    return NodeScores(genes, attention, expr, attention * expr, p_vals)


def extract_core(
    scores: NodeScores,
    weights: Mapping[tuple[str, str], float],
    top_nodes: int = DEFAULT_TOP_NODES,
    max_leaves: int = DEFAULT_MAX_LEAVES,
) -> CoreSubgraph:
    """Top-ranked connected subgraph with star-leaf pruning.

    Nodes are ranked by importance (ties: higher attention, then lower node
    id); the induced subgraph keeps only its largest connected component;
    every hub with more than ``max_leaves`` degree-1 neighbors keeps the
    preferred ones (significant p first, then highest edge weight).
    """
    if top_nodes < 1 or max_leaves < 0:
        raise InputError("top_nodes must be >= 1 and max_leaves >= 0")
    if not scores.genes:
        return CoreSubgraph([], [], {})
    order = sorted(
        range(len(scores.genes)),
        key=lambda i: (-scores.importance[i], -scores.attention[i], i),
    )
    kept = {scores.genes[i] for i in order[:top_nodes]}
    sig = {
        g: bool(scores.p_value[i] < SIGNIFICANCE_LEVEL)
        for i, g in enumerate(scores.genes)
    }

    adj: dict[str, dict[str, float]] = {g: {} for g in kept}
    for (g1, g2), w in weights.items():
        if g1 in kept and g2 in kept:
            adj[g1][g2] = w
            adj[g2][g1] = w

    component = _largest_component(adj)
    if not component:
        # no edges among retained nodes: keep the single best-ranked node
        component = {scores.genes[order[0]]}
    adj = {g: {h: w for h, w in nbrs.items() if h in component}
           for g, nbrs in adj.items() if g in component}

    # star pruning: drop surplus degree-1 neighbors per hub
    removed: set[str] = set()
    for hub in sorted(adj):
        leaves = [g for g in adj[hub] if len(adj[g]) == 1]
        if len(leaves) <= max_leaves:
            continue
        leaves.sort(key=lambda g: (not sig[g], -adj[hub][g], g))
        removed.update(leaves[max_leaves:])
    if removed:
        adj = {g: {h: w for h, w in nbrs.items() if h not in removed}
               for g, nbrs in adj.items() if g not in removed}

    nodes = sorted(adj)
    edges = sorted(
        (g1, g2, adj[g1][g2]) for g1 in adj for g2 in adj[g1] if g1 < g2
    )
    return CoreSubgraph(nodes, edges, {g: sig[g] for g in nodes})


def _largest_component(adj: Mapping[str, Mapping[str, float]]) -> set[str]:
    seen: set[str] = set()
    best: set[str] = set()
    for start in sorted(adj):
        if start in seen or not adj[start]:
            continue
        comp = {start}
        stack = [start]
        while stack:
            g = stack.pop()
            for h in adj[g]:
                if h not in comp:
                    comp.add(h)
                    stack.append(h)
        seen |= comp
        if len(comp) > len(best) or (len(comp) == len(best) and best and min(comp) < min(best)):
            best = comp
    return best


# -- exports ------------------------------------------------------------


def core_to_tsv(core: CoreSubgraph, path: Path | str) -> None:
    lines = ["gene1\tgene2\tweight\tflag1\tflag2"]
    for g1, g2, w in core.edges:
        lines.append(
            f"{g1}\t{g2}\t{float(w)!r}\t{int(core.flags[g1])}\t{int(core.flags[g2])}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def core_to_dot(core: CoreSubgraph, path: Path | str) -> None:
    lines = ["graph core {"]
    for g in core.nodes:
        attrs = ' [color="red"]' if core.flags[g] else ""
        lines.append(f'  "{g}"{attrs};')
    for g1, g2, w in core.edges:
        lines.append(f'  "{g1}" -- "{g2}" [weight={w:.6g}];')
    lines.append("}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def scores_to_csv(scores: NodeScores, path: Path | str) -> None:
    lines = ["gene,attention,expression,importance,p_value"]
    for i, g in enumerate(scores.genes):
        lines.append(
            f"{g},{float(scores.attention[i])!r},{float(scores.expression[i])!r},"
            f"{float(scores.importance[i])!r},{float(scores.p_value[i])!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
