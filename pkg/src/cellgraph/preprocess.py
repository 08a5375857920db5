"""Expression preprocessing: normalization, feature selection, PCA, KNN graphs,
and a simplified meta-cell aggregator with majority-voted attributes."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, fields as dc_fields, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .shard_store import AttributeRecord

_EIG_COL_LIMIT = 2000  # above this, PCA switches to power iteration


@dataclass
class PreprocessConfig:
    target_sum: float = 10_000.0
    n_hvg: int = 1500
    n_pcs: int = 50
    knn_k: int = 15
    metacell_group_size: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("target_sum", "n_hvg", "n_pcs", "knn_k", "metacell_group_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class MetaCell:
    member_rows: list[int]
    expression: np.ndarray
    attributes: AttributeRecord


@dataclass
class PcaResult:
    components: np.ndarray        # k x cols, orthonormal rows
    scores: np.ndarray            # rows x k
    explained_variance: np.ndarray
    mean: np.ndarray
    rank_deficient: bool = False


def normalize(counts: np.ndarray, target_sum: float = 10_000.0) -> np.ndarray:
    """Scale each row to sum to ``target_sum``, then log1p."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise InputError("negative entries in count matrix")
    sums = counts.sum(axis=1)
    zero = np.flatnonzero(sums == 0)
    if zero.size:
        raise InputError(f"all-zero row(s) cannot be normalized: rows {zero.tolist()}")
    return np.log1p(counts * (target_sum / sums)[:, None])


def select_hvg(matrix: np.ndarray, n: int) -> list[int]:
    """Indices of the ``n`` highest-variance columns, ties to the lower index,
    returned sorted ascending."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if n > matrix.shape[1]:
        raise InputError(f"requested {n} variable columns from {matrix.shape[1]}")
    var = matrix.var(axis=0)
    order = sorted(range(matrix.shape[1]), key=lambda j: (-var[j], j))
    return sorted(order[:n])


def pca(matrix: np.ndarray, k: int) -> PcaResult:
    """Principal components of the (internally centered) matrix.

    Components are orthonormal and ordered by non-increasing explained
    variance. If ``k`` exceeds the data rank, the trailing components come
    from an orthonormal completion and the result is flagged.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    rows, cols = matrix.shape
    if k > min(rows, cols):
        raise InputError(f"k={k} exceeds min(rows, cols)={min(rows, cols)}")
    mean = matrix.mean(axis=0)
    centered = matrix - mean
    if cols <= _EIG_COL_LIMIT:
        comps, evs = _pca_eig(centered, k)
    else:
        comps, evs = _pca_power(centered, k)
    tol = max(rows, cols) * np.finfo(np.float64).eps * max(evs[0], 1.0)
    deficient = bool(evs[-1] <= tol) if k > 0 else False
    scores = centered @ comps.T
    return PcaResult(comps, scores, evs, mean, deficient)


def _pca_eig(centered: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    cov = centered.T @ centered / max(centered.shape[0] - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    return evecs[:, order].T.copy(), np.maximum(evals[order], 0.0)


def _pca_power(centered: np.ndarray, k: int, iters: int = 500, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    # Power iteration with deflation; covariance applied implicitly so the
    # cols x cols matrix is never formed.
    rows, cols = centered.shape
    denom = max(rows - 1, 1)
    rng = np.random.default_rng(0)
    comps = np.zeros((k, cols))
    evs = np.zeros(k)
    for i in range(k):
        v = rng.standard_normal(cols)
        v -= comps[:i].T @ (comps[:i] @ v)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = centered.T @ (centered @ v) / denom
            w -= comps[:i].T @ (comps[:i] @ w)
            norm = np.linalg.norm(w)
            if norm <= tol:  # exhausted the data rank
                w = rng.standard_normal(cols)
                w -= comps[:i].T @ (comps[:i] @ w)
                w /= np.linalg.norm(w)
                lam = 0.0
                v = w
                break
            w /= norm
            if abs(norm - lam) <= tol * max(norm, 1.0):
                v, lam = w, norm
                break
            v, lam = w, norm
        comps[i] = v
        evs[i] = lam
    return comps, evs


def knn_graph(points: np.ndarray, k_neighbors: int) -> list[list[int]]:
    """For each point, its ``k_neighbors`` nearest others by Euclidean
    distance (self excluded, distance ties to the lower index)."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k_neighbors >= n:
        raise InputError(f"k_neighbors={k_neighbors} must be < number of points {n}")
    sq = np.sum(points ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    neighbors = []
    for i in range(n):
        order = sorted((j for j in range(n) if j != i), key=lambda j: (d2[i, j], j))
        neighbors.append(order[:k_neighbors])
    return neighbors


def _majority(values: Sequence[Optional[str]]) -> Optional[str]:
    present = [v for v in values if v is not None]
    if not present:
        return None
    counts = Counter(present)
    best = max(counts.values())
    return min(v for v, c in counts.items() if c == best)


def vote_attributes(members: Sequence[AttributeRecord]) -> AttributeRecord:
    """Majority vote per field; ties break to the lexicographically smallest
    value. The shard pointer follows the voted matrix_file_path."""
    voted = {}
    for f in dc_fields(AttributeRecord):
        if f.name == "matrix_row_idx":
            continue
        voted[f.name] = _majority([getattr(m, f.name) for m in members])
    path = voted["matrix_file_path"]
    voted["matrix_row_idx"] = min(
        m.matrix_row_idx for m in members if m.matrix_file_path == path
    )
    return AttributeRecord(**voted)


def _kmeans(points: np.ndarray, k: int, seed: int, iters: int = 100) -> np.ndarray:
    rng = np.random.default_rng(seed)
    centers = points[rng.choice(points.shape[0], size=k, replace=False)].copy()
    assign = np.zeros(points.shape[0], dtype=np.int64)
    for it in range(iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        if it > 0 and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            mask = assign == c
            if mask.any():
                centers[c] = points[mask].mean(axis=0)
    return assign


def build_metacells(
    matrix: np.ndarray,
    attrs: Sequence[AttributeRecord],
    cfg: PreprocessConfig,
) -> list[MetaCell]:
    """Partition rows into groups of roughly ``metacell_group_size`` by seeded
    k-means over PCA scores of the normalized matrix; each group's expression
    is the mean of its members' normalized rows and its attributes are
    majority-voted."""
    matrix = np.asarray(matrix, dtype=np.float64)
    rows = matrix.shape[0]
    if len(attrs) != rows:
        raise InputError(f"{rows} matrix rows but {len(attrs)} attribute records")
    normalized = normalize(matrix, cfg.target_sum)
    n_groups = max(1, -(-rows // cfg.metacell_group_size))
    if n_groups == 1:
        assign = np.zeros(rows, dtype=np.int64)
    else:
        hvg = select_hvg(normalized, min(cfg.n_hvg, normalized.shape[1]))
        reduced = normalized[:, hvg]
        k = min(cfg.n_pcs, rows, reduced.shape[1])
        scores = pca(reduced, k).scores
        assign = _kmeans(scores, n_groups, cfg.seed)
    cells = []
    for g in range(n_groups):
        members = np.flatnonzero(assign == g)
        if members.size == 0:
            continue
        cells.append(
            MetaCell(
                member_rows=members.tolist(),
                expression=normalized[members].mean(axis=0),
                attributes=vote_attributes([attrs[i] for i in members]),
            )
        )
    return cells
