"""Sharded storage of fixed-width expression matrices plus the aligned attribute table.

A matrix is split row-wise into NPY v1.0 files of ``shard_size`` rows each
(the last shard may be short). A JSON manifest records the layout so readers
can address any global row as (shard, local row) without loading the corpus.
Shard payloads are little-endian float32, C-order, which keeps files
byte-comparable across platforms.
"""

from __future__ import annotations

import ast
import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Optional, Sequence

import numpy as np

from .errors import InputError, SchemaError

NPY_MAGIC = b"\x93NUMPY"
_HEADER_ALIGN = 64

MANIFEST_NAME = "manifest.json"

# Table of attribute columns: name -> required.
ATTRIBUTE_COLUMNS = {
    "source": False,
    "dataset_id": True,
    "suspension_type": True,
    "tissue_general": True,
    "tissue": False,
    "matrix_file_path": True,
    "matrix_row_idx": True,
    "donor_id": True,
    "CMT_name": False,
    "disease_BMG_name": True,
    "development_stage_category": False,
    "sex_normalized": True,
}

REQUIRED_COLUMNS = [c for c, req in ATTRIBUTE_COLUMNS.items() if req]


@dataclass(frozen=True)
class ShardManifest:
    shard_size: int
    num_rows: int
    num_cols: int
    shard_paths: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.shard_size < 1:
            raise InputError(f"shard_size must be >= 1, got {self.shard_size}")
        expected = -(-self.num_rows // self.shard_size)
        if len(self.shard_paths) != expected:
            raise InputError(
                f"manifest lists {len(self.shard_paths)} shards, "
                f"expected ceil({self.num_rows}/{self.shard_size}) = {expected}"
            )

    @property
    def num_shards(self) -> int:
        return len(self.shard_paths)

    def shard_rows(self, shard_idx: int) -> int:
        if shard_idx < self.num_shards - 1:
            return self.shard_size
        return self.num_rows - self.shard_size * (self.num_shards - 1)

    def locate(self, global_idx: int) -> tuple[int, int]:
        """Map a global row index to (shard index, local row)."""
        if not 0 <= global_idx < self.num_rows:
            raise InputError(
                f"row index {global_idx} out of range [0, {self.num_rows})"
            )
        return global_idx // self.shard_size, global_idx % self.shard_size

    def save(self, dir_path: Path | str) -> Path:
        path = Path(dir_path) / MANIFEST_NAME
        doc = {
            "shard_size": self.shard_size,
            "num_rows": self.num_rows,
            "num_cols": self.num_cols,
            "shard_paths": list(self.shard_paths),
        }
        path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, dir_path: Path | str) -> "ShardManifest":
        path = Path(dir_path) / MANIFEST_NAME
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read manifest {path}: {exc}") from exc
        return cls(
            shard_size=int(doc["shard_size"]),
            num_rows=int(doc["num_rows"]),
            num_cols=int(doc["num_cols"]),
            shard_paths=tuple(doc["shard_paths"]),
        )


@dataclass
class ExpressionBlock:
    row_ids: list[int]
    values: np.ndarray  # |row_ids| x num_cols, float32, row-major


@dataclass
class AttributeRecord:
    dataset_id: str
    suspension_type: str
    tissue_general: str
    matrix_file_path: str
    matrix_row_idx: int
    donor_id: str
    disease_BMG_name: str
    sex_normalized: str
    source: Optional[str] = None
    tissue: Optional[str] = None
    CMT_name: Optional[str] = None
    development_stage_category: Optional[str] = None

    def get(self, attribute: str):
        if attribute not in ATTRIBUTE_COLUMNS:
            raise SchemaError(f"unknown attribute {attribute!r}")
        return getattr(self, attribute)


def _npy_header_bytes(shape: tuple[int, int]) -> bytes:
    header = (
        "{'descr': '<f4', 'fortran_order': False, "
        f"'shape': {shape!r}, }}"
    )
    base = len(NPY_MAGIC) + 2 + 2  # magic + version + header-length field
    pad = -(base + len(header) + 1) % _HEADER_ALIGN
    header = header + " " * pad + "\n"
    return NPY_MAGIC + bytes((1, 0)) + struct.pack("<H", len(header)) + header.encode("latin1")


def write_npy(path: Path | str, matrix: np.ndarray) -> None:
    """Write a 2-D float32 matrix as an NPY v1.0 file."""
    data = np.ascontiguousarray(matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_npy_header_bytes(data.shape))
        fh.write(data.tobytes(order="C"))


def read_npy_header(fh: BinaryIO) -> tuple[tuple[int, ...], int]:
    """Parse an NPY v1.0 header; returns (shape, data offset).

    Rejects anything other than little-endian float32, C-order.
    """
    magic = fh.read(6)
    if magic != NPY_MAGIC:
        raise InputError(f"not an NPY file (magic {magic!r})")
    version = fh.read(2)
    if version != bytes((1, 0)):
        raise InputError(f"unsupported NPY version {tuple(version)}")
    (hlen,) = struct.unpack("<H", fh.read(2))
    header = fh.read(hlen).decode("latin1")
    if not header.endswith("\n"):
        raise InputError("NPY header not newline-terminated")
    try:
        meta = ast.literal_eval(header)
    except (ValueError, SyntaxError) as exc:
        raise InputError(f"malformed NPY header: {exc}") from exc
    if meta.get("descr") != "<f4":
        raise InputError(f"unsupported dtype {meta.get('descr')!r}, expected '<f4'")
    if meta.get("fortran_order"):
        raise InputError("fortran-order NPY shards are not supported")
    return tuple(meta["shape"]), 6 + 2 + 2 + hlen


def read_npy(path: Path | str) -> np.ndarray:
    with open(path, "rb") as fh:
        shape, _ = read_npy_header(fh)
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(fh.read(n * 4), dtype="<f4")
        if data.size != n:
            raise InputError(f"truncated NPY file {path}")
    return data.reshape(shape)


def write_shards(matrix: np.ndarray, shard_size: int, dir_path: Path | str) -> ShardManifest:
    """Split ``matrix`` row-wise into NPY shards under ``dir_path``."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise InputError(f"expected a non-empty 2-D matrix, got shape {matrix.shape}")
    if matrix.shape[1] == 0:
        raise InputError("zero-column matrix rejected")
    if shard_size < 1:
        raise InputError(f"shard_size must be >= 1, got {shard_size}")

    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    num_rows, num_cols = matrix.shape
    num_shards = -(-num_rows // shard_size)
    paths = []
    for i in range(num_shards):
        rel = f"shard_{i:05d}.npy"
        write_npy(dir_path / rel, matrix[i * shard_size : (i + 1) * shard_size])
        paths.append(rel)
    manifest = ShardManifest(shard_size, num_rows, num_cols, tuple(paths))
    manifest.save(dir_path)
    return manifest


def read_plan(manifest: ShardManifest, indices: Sequence[int]) -> dict[int, list[tuple[int, int]]]:
    """Group requested global indices by shard: shard -> [(local_row, out_pos)]."""
    plan: dict[int, list[tuple[int, int]]] = {}
    for pos, g in enumerate(indices):
        shard, local = manifest.locate(int(g))
        plan.setdefault(shard, []).append((local, pos))
    return plan


def read_rows(manifest: ShardManifest, indices: Sequence[int], dir_path: Path | str) -> ExpressionBlock:
    """Materialize the requested rows, in request order.

    Each touched shard is opened once; rows are read individually by seek,
    so memory stays O(|indices| x num_cols) plus one row buffer.
    """
    dir_path = Path(dir_path)
    indices = [int(g) for g in indices]
    out = np.empty((len(indices), manifest.num_cols), dtype="<f4")
    row_bytes = manifest.num_cols * 4
    for shard, rows in sorted(read_plan(manifest, indices).items()):
        with open(dir_path / manifest.shard_paths[shard], "rb") as fh:
            shape, offset = read_npy_header(fh)
            if shape[1] != manifest.num_cols:
                raise InputError(
                    f"shard {manifest.shard_paths[shard]} has {shape[1]} cols, "
                    f"manifest says {manifest.num_cols}"
                )
            for local, pos in sorted(rows):
                fh.seek(offset + local * row_bytes)
                out[pos] = np.frombuffer(fh.read(row_bytes), dtype="<f4")
    return ExpressionBlock(row_ids=indices, values=out)


def load_attributes(csv_path: Path | str) -> list[AttributeRecord]:
    """Load the attribute table from CSV (RFC-4180 quoting, UTF-8)."""
    with open(csv_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{csv_path}: empty attribute table")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise SchemaError(
                f"{csv_path}: missing required columns {missing}; "
                f"required: {REQUIRED_COLUMNS}"
            )
        records = []
        for lineno, row in enumerate(reader, start=2):
            raw_idx = (row.get("matrix_row_idx") or "").strip()
            try:
                row_idx = int(raw_idx)
            except ValueError as exc:
                raise InputError(
                    f"{csv_path}:{lineno}: malformed matrix_row_idx {raw_idx!r}"
                ) from exc
            if row_idx < 0:
                raise InputError(f"{csv_path}:{lineno}: negative matrix_row_idx {row_idx}")

            def opt(col: str) -> Optional[str]:
                v = row.get(col)
                return v if v else None

            records.append(
                AttributeRecord(
                    dataset_id=row["dataset_id"],
                    suspension_type=row["suspension_type"],
                    tissue_general=row["tissue_general"],
                    matrix_file_path=row["matrix_file_path"],
                    matrix_row_idx=row_idx,
                    donor_id=row["donor_id"],
                    disease_BMG_name=row["disease_BMG_name"],
                    sex_normalized=row["sex_normalized"],
                    source=opt("source"),
                    tissue=opt("tissue"),
                    CMT_name=opt("CMT_name"),
                    development_stage_category=opt("development_stage_category"),
                )
            )
    return records


def validate_pointers(records: Iterable[AttributeRecord], root: Path | str) -> list[str]:
    """Check that every (matrix_file_path, matrix_row_idx) resolves to a stored row.

    Returns a list of human-readable problems; empty means all pointers resolve.
    """
    root = Path(root)
    shapes: dict[str, Optional[tuple[int, ...]]] = {}
    problems = []
    for i, rec in enumerate(records):
        rel = rec.matrix_file_path
        if rel not in shapes:
            path = root / rel
            if not path.is_file():
                shapes[rel] = None
            else:
                with open(path, "rb") as fh:
                    shapes[rel], _ = read_npy_header(fh)
        shape = shapes[rel]
        if shape is None:
            problems.append(f"record {i}: matrix file {rel!r} not found under {root}")
        elif rec.matrix_row_idx >= shape[0]:
            problems.append(
                f"record {i}: row {rec.matrix_row_idx} out of range for {rel!r} "
                f"({shape[0]} rows)"
            )
    return problems
