"""Two-phase stratified cohort retrieval, donor-level splitting, and rare-class
upsampling.

Phase I filters rows by a conjunctive attribute query. Phase II balances the
result into case/control strata over exact-match keys, admitting controls in
widening offset layers along an ordered age-stage axis up to a tolerance, with
optional with-replacement upsampling of short strata. All randomness is driven
by an explicit seed, so identical inputs give identical cohorts.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import ConfigError, SchemaError
from .shard_store import ATTRIBUTE_COLUMNS, AttributeRecord

log = logging.getLogger(__name__)

UNKNOWN = "unknown"


@dataclass(frozen=True)
class Query:
    constraints: dict[str, frozenset]

    def __post_init__(self) -> None:
        for a, values in self.constraints.items():
            if a not in ATTRIBUTE_COLUMNS:
                raise SchemaError(f"unknown attribute {a!r} in query")
            if not values:
                raise SchemaError(f"empty admissible set for attribute {a!r}")

    def without(self, attribute: str) -> "Query":
        return Query({a: v for a, v in self.constraints.items() if a != attribute})


@dataclass(frozen=True)
class TaskConfig:
    balance_field: str
    control_value: str
    match_keys: tuple[str, ...]
    age_key_index: int
    age_order: tuple[str, ...]
    tolerance: int = 0
    upsample: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.balance_field in self.match_keys:
            raise ConfigError("balance_field must not appear among match_keys")
        if not 0 <= self.age_key_index < len(self.match_keys):
            raise ConfigError(
                f"age_key_index {self.age_key_index} out of range for "
                f"{len(self.match_keys)} match keys"
            )
        if self.tolerance < 0:
            raise ConfigError(f"tolerance must be >= 0, got {self.tolerance}")
        for a in (self.balance_field, *self.match_keys):
            if a not in ATTRIBUTE_COLUMNS:
                raise SchemaError(f"unknown attribute {a!r} in task config")

    @property
    def age_key(self) -> str:
        return self.match_keys[self.age_key_index]

    def age_rank(self, stage) -> int:
        try:
            return self.age_order.index(stage)
        except ValueError:
            raise ConfigError(
                f"age stage {stage!r} not present in age_order {list(self.age_order)}"
            ) from None


@dataclass
class Cohort:
    rows: list[int]
    labels: list[str]
    strata: dict[tuple, tuple[list[int], list[int]]] = field(default_factory=dict)


def _eval(rec: AttributeRecord, attribute: str) -> str:
    # Missing values surface as the normalized "unknown" token, so they match
    # a constraint only when the query names "unknown" explicitly.
    v = rec.get(attribute)
    return UNKNOWN if v is None else str(v)


def attribute_value(rec: AttributeRecord, attribute: str) -> str:
    """Public accessor with the same missing-value semantics as queries."""
    return _eval(rec, attribute)


def _satisfies(rec: AttributeRecord, q: Query) -> bool:
    return all(_eval(rec, a) in values for a, values in q.constraints.items())


def phase1_extract(records: Sequence[AttributeRecord], q: Query) -> list[int]:
    """Indices of rows satisfying every constraint; an empty query keeps all."""
    return [i for i, rec in enumerate(records) if _satisfies(rec, q)]


def phase2_balance(records: Sequence[AttributeRecord], q: Query, cfg: TaskConfig) -> Cohort:
    """Key-stratified case/control balancing of the Phase I result.

    Cases are the filtered rows whose balance field differs from the control
    value; the control pool re-applies the query minus the balance field with
    the balance field pinned to the control value. The smaller side acts as
    the reference. Controls are admitted per stratum in cumulative age-offset
    layers 0..tolerance (exact match on all other keys), sampled without
    replacement inside each layer; short strata are upsampled with
    replacement when enabled, otherwise trimmed so case and control counts
    stay equal. Strata with no admissible match are discarded.
    """
    b, b0 = cfg.balance_field, cfg.control_value
    feasible = phase1_extract(records, q)
    cases = [i for i in feasible if _eval(records[i], b) != b0]
    q_minus_b = q.without(b)
    controls = [
        i
        for i, rec in enumerate(records)
        if _eval(rec, b) == b0 and _satisfies(rec, q_minus_b)
    ]

    def has_keys(i: int) -> bool:
        return all(records[i].get(k) is not None for k in cfg.match_keys)

    cases = [i for i in cases if has_keys(i)]
    controls = [i for i in controls if has_keys(i)]

    if len(cases) <= len(controls):
        ref, tgt, ref_is_case = cases, controls, True
    else:
        ref, tgt, ref_is_case = controls, cases, False

    def key_of(i: int) -> tuple:
        return tuple(_eval(records[i], k) for k in cfg.match_keys)

    ref_strata: dict[tuple, list[int]] = {}
    for i in ref:
        ref_strata.setdefault(key_of(i), []).append(i)

    rng = random.Random(cfg.seed)
    cohort = Cohort(rows=[], labels=[])
    used: set[int] = set()  # global: a target row may match at most one stratum
    for kappa in sorted(ref_strata):
        ref_rows = sorted(ref_strata[kappa])
        n_kappa = len(ref_rows)
        kappa_rank = cfg.age_rank(kappa[cfg.age_key_index])
        match: list[int] = []
        for t in range(cfg.tolerance + 1):
            cand = [
                i
                for i in tgt
                if i not in used
                and all(
                    _eval(records[i], k) == kappa[j]
                    for j, k in enumerate(cfg.match_keys)
                    if j != cfg.age_key_index
                )
                and abs(cfg.age_rank(_eval(records[i], cfg.age_key)) - kappa_rank) <= t
            ]
            cand.sort()
            take = rng.sample(cand, min(n_kappa - len(match), len(cand)))
            match.extend(take)
            used.update(take)
            if len(match) == n_kappa:
                break
        if 0 < len(match) < n_kappa and cfg.upsample:
            match.extend(rng.choices(match, k=n_kappa - len(match)))
        if not match:
            continue
        if len(match) < n_kappa:
            # short stratum without upsampling: trim reference rows so the
            # stratum stays balanced
            ref_rows = ref_rows[: len(match)]
        case_rows = ref_rows if ref_is_case else match
        control_rows = match if ref_is_case else ref_rows
        cohort.strata[kappa] = (case_rows, control_rows)
        cohort.rows.extend(ref_rows)
        cohort.rows.extend(match)

    cohort.labels = [_eval(records[i], b) for i in cohort.rows]
    return cohort


def donor_split(
    records: Sequence[AttributeRecord],
    test_fraction: float,
    cap: float,
    seed: int = 0,
) -> tuple[list[int], list[int]]:
    """Donor-level train/test split: every (dataset_id, donor_id) lands wholly
    on one side. Donors are visited in seeded random order biased toward
    smaller donors; selection stops once adding the next donor would push the
    test side past cap * total rows.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if not 0.0 < cap <= 1.0:
        raise ConfigError(f"cap must be in (0, 1], got {cap}")
    donors: dict[tuple[str, str], list[int]] = {}
    for i, rec in enumerate(records):
        donors.setdefault((rec.dataset_id, rec.donor_id), []).append(i)

    keys = sorted(donors)
    rng = random.Random(seed)
    rng.shuffle(keys)
    # bias toward smaller donors: stable-sort by row count within blocks of 4
    ordered: list[tuple[str, str]] = []
    for start in range(0, len(keys), 4):
        block = keys[start : start + 4]
        ordered.extend(sorted(block, key=lambda k: len(donors[k])))

    total = len(records)
    target = test_fraction * total
    cap_rows = cap * total
    test: list[int] = []
    for key in ordered:
        if len(test) >= target:
            break
        if len(test) + len(donors[key]) > cap_rows:
            break
        test.extend(donors[key])
    test_set = set(test)
    train = [i for i in range(total) if i not in test_set]
    return train, sorted(test)


def upsample_rare(
    rows: Sequence[int],
    labels: Sequence[str],
    min_count: int,
    seed: int = 0,
    classes: Optional[Sequence[str]] = None,
) -> tuple[list[int], list[str]]:
    """Duplicate members of classes with fewer than ``min_count`` rows until
    each reaches the floor; classes already at the floor are untouched.
    Requested classes with zero members are reported and left at zero."""
    if min_count < 1:
        raise ConfigError(f"min_count must be >= 1, got {min_count}")
    if len(rows) != len(labels):
        raise ConfigError("rows and labels must align")
    by_class: dict[str, list[int]] = {}
    for r, lab in zip(rows, labels):
        by_class.setdefault(lab, []).append(r)
    if classes:
        for c in classes:
            if c not in by_class:
                log.warning("class %r has no members and cannot be upsampled", c)
    rng = random.Random(seed)
    out_rows = list(rows)
    out_labels = list(labels)
    for lab in sorted(by_class):
        members = by_class[lab]
        if 0 < len(members) < min_count:
            extra = rng.choices(members, k=min_count - len(members))
            out_rows.extend(extra)
            out_labels.extend([lab] * len(extra))
    return out_rows, out_labels


def query_from_json(doc: dict) -> Query:
    """Build a query from {"attribute": value-or-list} JSON."""
    constraints = {}
    for a, v in doc.items():
        values = v if isinstance(v, (list, tuple)) else [v]
        constraints[a] = frozenset(str(x) for x in values)
    return Query(constraints)


def task_config_from_json(doc: dict) -> TaskConfig:
    match_keys = tuple(doc["match_keys"])
    age_key = doc.get("age_key")
    if age_key is not None:
        if age_key not in match_keys:
            raise ConfigError(f"age_key {age_key!r} not among match_keys")
        age_idx = match_keys.index(age_key)
    else:
        age_idx = int(doc["age_key_index"])
    return TaskConfig(
        balance_field=doc["balance_field"],
        control_value=doc["control_value"],
        match_keys=match_keys,
        age_key_index=age_idx,
        age_order=tuple(doc["age_order"]),
        tolerance=int(doc.get("tolerance", 0)),
        upsample=bool(doc.get("upsample", False)),
        seed=int(doc.get("seed", 0)),
    )
