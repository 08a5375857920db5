"""Self-supervised pretraining model over the signaling graph.

Per entity, a scalar omic measurement and three text-derived embeddings are
fused to a hidden state; messages then propagate transcript -> protein over
internal edges and across visible PPI edges (symmetric-normalized, with a
linear self-term and tanh). Training masks a Bernoulli sample of PPI edges,
scores edges with a sigmoid decoder over elementwise products of endpoint
states, regresses node degrees, and descends the joint loss with plain
full-batch gradient descent. Gradients are verified against central finite
differences on a frozen micro-instance before training starts.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InputError
from .graph_build import SignalingGraph, build_graph, pseudo_text_embed

PROB_EPS = 1e-7  # BCE is undefined at u in {0, 1}

CHECKPOINT_MAGIC = b"CGFMCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d_prime: int = 16
    d: int = 16
    mask_ratio: float = 0.1
    lambda_edge: float = 1.0
    lambda_deg: float = 1.0
    neg_ratio: float = 1.0
    layers_internal: int = 1
    layers_global: int = 2
    learning_rate: float = 0.05
    epochs: int = 100
    seed: int = 0
    internal_undirected: bool = False

    def __post_init__(self) -> None:
        if self.d_prime < 1 or self.d < 1:
            raise ConfigError("embedding widths must be >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.lambda_edge < 0 or self.lambda_deg < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.neg_ratio <= 0:
            raise ConfigError("neg_ratio must be positive")


@dataclass
class MaskPlan:
    masked: tuple[tuple[int, int], ...]
    visible: tuple[tuple[int, int], ...]
    negatives: tuple[tuple[int, int], ...]


@dataclass
class EpochStats:
    epoch: int
    l_total: float
    l_edge: float
    l_deg: float
    auc: float


def sample_mask(
    graph: SignalingGraph,
    p: float,
    seed: int,
    neg_ratio: float = 1.0,
) -> MaskPlan:
    """Independently mask each PPI edge with probability ``p``; draw
    ``neg_ratio * |visible|`` negatives uniformly from absent protein pairs."""
    edges = graph.edges.ppi
    if not edges:
        raise InputError("graph has no PPI edges to mask")
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"mask probability must be in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    keep = rng.random(len(edges)) >= p
    visible = tuple(e for e, k in zip(edges, keep) if k)
    masked = tuple(e for e, k in zip(edges, keep) if not k)
    n_neg = int(round(neg_ratio * len(visible)))
    negatives = sample_negatives(graph, n_neg, rng)
    return MaskPlan(masked=masked, visible=visible, negatives=negatives)


def sample_negatives(
    graph: SignalingGraph, count: int, rng: np.random.Generator
) -> tuple[tuple[int, int], ...]:
    """Uniform directed protein pairs absent from the PPI edge set (no
    self-pairs)."""
    m_t = graph.entities.num_transcripts
    m_p = graph.entities.num_proteins
    existing = set(graph.edges.ppi)
    max_pairs = m_p * (m_p - 1) - len(existing)
    if count > max_pairs:
        raise InputError(f"cannot draw {count} negatives; only {max_pairs} non-edges")
    out: list[tuple[int, int]] = []
    while len(out) < count:
        i = int(rng.integers(m_p)) + m_t
        j = int(rng.integers(m_p)) + m_t
        if i != j and (i, j) not in existing:
            out.append((i, j))
    return tuple(out)


def _internal_adjacency(graph: SignalingGraph, undirected: bool, dtype, device=None) -> torch.Tensor:
    m = graph.num_entities
    a = torch.zeros((m, m), dtype=dtype, device=device)
    for t, p in graph.edges.internal:
        a[p, t] = 1.0
        if undirected:
            a[t, p] = 1.0
    row = a.sum(dim=1, keepdim=True).clamp(min=1.0)
    return a / row  # mean over neighbors; rows without edges stay zero


def _sym_norm_adjacency(
    edges: Sequence[tuple[int, int]], m: int, dtype, device=None
) -> torch.Tensor:
    a = torch.zeros((m, m), dtype=dtype, device=device)
    for i, j in edges:
        a[i, j] = 1.0
        a[j, i] = 1.0
    deg = a.sum(dim=1).clamp(min=1.0)
    inv_sqrt = deg.rsqrt()
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


def ppi_degrees(graph: SignalingGraph) -> np.ndarray:
    """Per-entity incident PPI edge count on the full (unmasked) graph."""
    deg = np.zeros(graph.num_entities)
    for i, j in graph.edges.ppi:
        deg[i] += 1.0
        deg[j] += 1.0
    return deg


class PretrainModel(nn.Module):
    """Encoders, propagation layers, and both decoders."""

    def __init__(
        self,
        cfg: ModelConfig,
        graph: SignalingGraph,
        text_embeddings: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        self.graph = graph
        d_p, d = cfg.d_prime, cfg.d
        if text_embeddings is None:
            text_embeddings = pseudo_text_embed(graph.text, d_p, cfg.seed)
        for emb in text_embeddings:
            if emb.shape != (graph.num_entities, d_p):
                raise InputError(
                    f"text embedding shape {emb.shape} != ({graph.num_entities}, {d_p})"
                )
        stacked = np.concatenate(text_embeddings, axis=1)
        self.register_buffer("text_emb", torch.as_tensor(stacked, dtype=dtype))
        self.register_buffer(
            "adj_internal",
            _internal_adjacency(graph, cfg.internal_undirected, dtype),
        )

        gen = torch.Generator().manual_seed(cfg.seed)

        def linear(n_in: int, n_out: int, bias: bool = True) -> nn.Linear:
            layer = nn.Linear(n_in, n_out, bias=bias, dtype=dtype)
            bound = 1.0 / np.sqrt(n_in)
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=gen)
                if bias:
                    layer.bias.uniform_(-bound, bound, generator=gen)
            return layer

        self.omic_weight = nn.Parameter(
            torch.empty(d_p, dtype=dtype).uniform_(-1.0, 1.0, generator=gen)
        )
        self.omic_bias = nn.Parameter(torch.zeros(d_p, dtype=dtype))
        self.cross_fusion = linear(4 * d_p, d_p)
        self.internal_self = nn.ModuleList(
            [linear(d_p, d_p) for _ in range(cfg.layers_internal)]
        )
        self.internal_nbr = nn.ModuleList(
            [linear(d_p, d_p, bias=False) for _ in range(cfg.layers_internal)]
        )
        self.pre_mlp = linear(d_p, d)
        self.global_self = nn.ModuleList(
            [linear(d, d) for _ in range(cfg.layers_global)]
        )
        self.global_nbr = nn.ModuleList(
            [linear(d, d, bias=False) for _ in range(cfg.layers_global)]
        )
        self.edge_decoder = linear(d, 1)
        self.degree_decoder = linear(d, 1)

    # -- forward stages -------------------------------------------------

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Fuse per-entity omic scalars with the three text embeddings."""
        if not torch.isfinite(x).all():
            raise InputError("non-finite values in omic input")
        omic = x.unsqueeze(-1) * self.omic_weight + self.omic_bias
        text = self.text_emb.expand(x.shape[0], -1, -1)
        fused = torch.cat([omic, text], dim=-1)
        return torch.tanh(self.cross_fusion(fused))

    def propagate_internal(self, h: torch.Tensor) -> torch.Tensor:
        for self_l, nbr_l in zip(self.internal_self, self.internal_nbr):
            h = torch.tanh(self_l(h) + torch.matmul(self.adj_internal, nbr_l(h)))
        return h

    def propagate_global(self, h: torch.Tensor, adj_visible: torch.Tensor) -> torch.Tensor:
        h = self.pre_mlp(h)
        for self_l, nbr_l in zip(self.global_self, self.global_nbr):
            h = torch.tanh(self_l(h) + torch.matmul(adj_visible, nbr_l(h)))
        return h

    def forward(self, x: torch.Tensor, adj_visible: torch.Tensor) -> torch.Tensor:
        return self.propagate_global(self.propagate_internal(self.encode(x)), adj_visible)

    def visible_adjacency(self, edges: Sequence[tuple[int, int]]) -> torch.Tensor:
        return _sym_norm_adjacency(
            edges, self.graph.num_entities, self.text_emb.dtype
        )

    # -- decoders -------------------------------------------------------

    def edge_prob(self, h: torch.Tensor, pairs: Sequence[tuple[int, int]]) -> torch.Tensor:
        """sigma(w . (h_i * h_j) + b); symmetric in (i, j). Shape N x |pairs|."""
        idx = torch.as_tensor(pairs, dtype=torch.long)
        prod = h[:, idx[:, 0], :] * h[:, idx[:, 1], :]
        return torch.sigmoid(self.edge_decoder(prod).squeeze(-1))

    def degree_pred(self, h: torch.Tensor) -> torch.Tensor:
        return self.degree_decoder(h).squeeze(-1)


def pretrain_loss(
    model: PretrainModel,
    h: torch.Tensor,
    positives: Sequence[tuple[int, int]],
    negatives: Sequence[tuple[int, int]],
    degrees: torch.Tensor,
    cfg: ModelConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Joint objective: BCE over visible/negative edges plus degree MSE,
    averaged over samples. Returns (total, edge term, degree term)."""
    n = h.shape[0]
    zero = h.new_zeros(n)
    if positives:
        u_pos = model.edge_prob(h, positives).clamp(PROB_EPS, 1.0 - PROB_EPS)
        l_pos = torch.log(u_pos).mean(dim=1)
    else:
        l_pos = zero
    if negatives:
        u_neg = model.edge_prob(h, negatives).clamp(PROB_EPS, 1.0 - PROB_EPS)
        l_neg = torch.log1p(-u_neg).mean(dim=1)
    else:
        l_neg = zero
    l_edge = -(l_pos + l_neg)
    l_deg = ((model.degree_pred(h) - degrees) ** 2).mean(dim=1)
    per_sample = cfg.lambda_edge * l_edge + cfg.lambda_deg * l_deg
    return per_sample.mean(), l_edge.mean(), l_deg.mean()


def masked_edge_auc(
    model: PretrainModel,
    h: torch.Tensor,
    plan: MaskPlan,
    seed: int = 0,
) -> tuple[float, float]:
    """Held-out reconstruction quality: AUC of masked edges against an
    equal-size fresh negative sample, and the fraction of masked edges scored
    above 0.5. Scores are sample-averaged probabilities."""
    if not plan.masked:
        raise InputError("mask plan has no masked edges to evaluate")
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        negatives = sample_negatives(model.graph, len(plan.masked), rng)
        pos = model.edge_prob(h, plan.masked).mean(dim=0).numpy()
        neg = model.edge_prob(h, negatives).mean(dim=0).numpy()
    return rank_auc(pos, neg), float(np.mean(pos > 0.5))


def rank_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """AUC via midranks; ties count half."""
    scores = np.concatenate([pos, neg])
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    r_pos = ranks[: len(pos)].sum()
    return float((r_pos - len(pos) * (len(pos) + 1) / 2.0) / (len(pos) * len(neg)))


def train(
    graph: SignalingGraph,
    features: np.ndarray,
    cfg: ModelConfig,
    text_embeddings: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
    check_gradients: bool = True,
) -> tuple[PretrainModel, list[EpochStats]]:
    """Full-batch gradient descent on the joint pretraining objective.

    ``features`` is the N x M entity feature matrix (already expanded onto
    the entity axis). Negatives are resampled each epoch; the mask plan is
    drawn once. Single-threaded and bitwise deterministic for a fixed seed.
    """
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    if check_gradients:
        err = gradient_check()
        if err > 1e-4:
            raise RuntimeError(f"gradient check failed: max relative error {err:.3g}")

    features = np.asarray(features, dtype=np.float64)
    if not np.isfinite(features).all():
        raise InputError("non-finite values in feature matrix")
    model = PretrainModel(cfg, graph, text_embeddings)
    plan = sample_mask(graph, cfg.mask_ratio, cfg.seed, cfg.neg_ratio)
    adj_vis = model.visible_adjacency(plan.visible)
    degrees = torch.as_tensor(ppi_degrees(graph), dtype=model.text_emb.dtype)
    x = torch.as_tensor(features, dtype=model.text_emb.dtype)

    history: list[EpochStats] = []
    negatives = plan.negatives
    for epoch in range(cfg.epochs):
        if epoch > 0:
            rng = np.random.default_rng((cfg.seed, epoch))
            negatives = sample_negatives(graph, len(plan.negatives), rng)
        model.zero_grad()
        h = model(x, adj_vis)
        total, l_edge, l_deg = pretrain_loss(
            model, h, plan.visible, negatives, degrees, cfg
        )
        if not torch.isfinite(total):
            raise RuntimeError(f"training diverged at epoch {epoch}: loss {total.item()}")
        total.backward()
        with torch.no_grad():
            for p in model.parameters():
                if p.grad is not None:
                    p -= cfg.learning_rate * p.grad
            auc, _ = masked_edge_auc(model, model(x, adj_vis), plan, seed=cfg.seed)
        history.append(
            EpochStats(epoch, float(total.item()), float(l_edge.item()), float(l_deg.item()), auc)
        )
    return model, history


# -- gradient verification ----------------------------------------------


def micro_instance() -> tuple[SignalingGraph, np.ndarray, ModelConfig]:
    """Frozen toy problem for gradient checks: 6 proteins in an 8-edge PPI
    graph, fed by 4 transcripts, with d = d' = 4."""
    mapping = [(f"f{i}", f"t{i}", f"p{i}") for i in range(6)]
    ppi = [
        ("p0", "p1"), ("p1", "p2"), ("p2", "p3"), ("p3", "p4"),
        ("p4", "p5"), ("p5", "p0"), ("p0", "p2"), ("p1", "p4"),
    ]
    text = {f"p{i}": (f"prot{i}", f"desc{i}", "MKV" * (i + 1)) for i in range(6)}
    graph = build_graph(mapping, ppi, text)
    rng = np.random.default_rng(7)
    features = rng.normal(size=(2, graph.num_entities))
    cfg = ModelConfig(d_prime=4, d=4, mask_ratio=0.25, epochs=1, seed=3)
    return graph, features, cfg


def gradient_check(step: float = 1e-5) -> float:
    """Max per-tensor relative error between autograd gradients of the total
    loss and central finite differences, on the frozen micro-instance."""
    graph, features, cfg = micro_instance()
    torch.manual_seed(cfg.seed)
    model = PretrainModel(cfg, graph, dtype=torch.float64)
    plan = sample_mask(graph, cfg.mask_ratio, cfg.seed, cfg.neg_ratio)
    adj_vis = model.visible_adjacency(plan.visible)
    degrees = torch.as_tensor(ppi_degrees(graph), dtype=torch.float64)
    x = torch.as_tensor(features, dtype=torch.float64)

    def loss_value() -> torch.Tensor:
        h = model(x, adj_vis)
        total, _, _ = pretrain_loss(model, h, plan.visible, plan.negatives, degrees, cfg)
        return total

    model.zero_grad()
    loss_value().backward()
    worst = 0.0
    for p in model.parameters():
        analytic = p.grad.detach().clone()
        numeric = torch.zeros_like(analytic)
        flat = p.data.view(-1)
        num_flat = numeric.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = loss_value().item()
            flat[i] = orig - step
            down = loss_value().item()
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * step)
        denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        worst = max(worst, (analytic - numeric).norm().item() / denom)
    return worst


# -- checkpoint container -----------------------------------------------


def save_checkpoint(path: Path | str, model: PretrainModel) -> None:
    """Binary container: magic, version, JSON header (config, tensor shapes,
    seed), then raw little-endian float32 tensors in declared order."""
    names = [n for n, _ in model.named_parameters()]
    header = {
        "config": asdict(model.cfg),
        "seed": model.cfg.seed,
        "tensors": [
            [n, list(p.shape)] for n, p in model.named_parameters()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        params = dict(model.named_parameters())
        for n in names:
            fh.write(params[n].detach().to(torch.float32).numpy().astype("<f4").tobytes())


def load_checkpoint(path: Path | str, graph: SignalingGraph) -> PretrainModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise InputError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        cfg = ModelConfig(**header["config"])
        model = PretrainModel(cfg, graph)
        params = dict(model.named_parameters())
        with torch.no_grad():
            for name, shape in header["tensors"]:
                if name not in params:
                    raise InputError(f"{path}: unexpected tensor {name!r}")
                n = int(np.prod(shape)) if shape else 1
                data = np.frombuffer(fh.read(n * 4), dtype="<f4").reshape(shape)
                params[name].copy_(torch.as_tensor(data.copy(), dtype=params[name].dtype))
    return model


def write_history(path: Path | str, history: Sequence[EpochStats]) -> None:
    lines = ["epoch,l_total,l_edge,l_deg,auc"]
    for h in history:
        lines.append(f"{h.epoch},{h.l_total!r},{h.l_edge!r},{h.l_deg!r},{h.auc!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
