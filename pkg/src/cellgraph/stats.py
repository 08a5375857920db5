"""Two-sided Mann-Whitney U test.

Exact enumeration over all group assignments when both groups have at most
``EXACT_LIMIT`` members (handles ties correctly by enumerating the observed
pooled values); otherwise the normal approximation with tie correction and
continuity correction.
"""

from __future__ import annotations

import math
from itertools import combinations
from typing import Sequence

EXACT_LIMIT = 8


def _midranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=values.__getitem__)
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def u_statistic(x: Sequence[float], y: Sequence[float]) -> float:
    """U statistic of the first group (number of (x, y) pairs with x > y,
    ties counted half), via midranks."""
    n1 = len(x)
    ranks = _midranks(list(x) + list(y))
    r1 = sum(ranks[:n1])
    return r1 - n1 * (n1 + 1) / 2.0


def _exact_p(x: Sequence[float], y: Sequence[float]) -> float:
    pooled = list(x) + list(y)
    n1 = len(x)
    u_obs = u_statistic(x, y)
    total = 0
    le = 0
    ge = 0
    eps = 1e-9
    for idx in combinations(range(len(pooled)), n1):
        chosen = set(idx)
        gx = [pooled[i] for i in idx]
        gy = [pooled[i] for i in range(len(pooled)) if i not in chosen]
        u = u_statistic(gx, gy)
        total += 1
        if u <= u_obs + eps:
            le += 1
        if u >= u_obs - eps:
            ge += 1
    return min(1.0, 2.0 * min(le, ge) / total)


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _approx_p(x: Sequence[float], y: Sequence[float]) -> float:
    n1, n2 = len(x), len(y)
    n = n1 + n2
    ranks = _midranks(list(x) + list(y))
    # tie correction factor
    tie_sum = 0
    sorted_ranks = sorted(ranks)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_ranks[j + 1] == sorted_ranks[i]:
            j += 1
        t = j - i + 1
        tie_sum += t ** 3 - t
        i = j + 1
    correction = 1.0 - tie_sum / (n ** 3 - n)
    if correction <= 0.0:
        return 1.0
    sd = math.sqrt(correction * n1 * n2 * (n + 1) / 12.0)
    if sd == 0.0:
        return 1.0
    u1 = u_statistic(x, y)
    big_u = max(u1, n1 * n2 - u1)
    z = (big_u - n1 * n2 / 2.0 - 0.5) / sd  # 0.5: continuity correction
    return min(1.0, 2.0 * _norm_sf(z))


def mann_whitney_u(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Returns (U statistic of the first group, two-sided p-value)."""
    if len(x) == 0 or len(y) == 0:
        raise ValueError("both groups must be non-empty")
    u = u_statistic(x, y)
    if len(x) <= EXACT_LIMIT and len(y) <= EXACT_LIMIT:
        return u, _exact_p(x, y)
    return u, _approx_p(x, y)
