"""Descriptor store, exact nearest-neighbour search and Recall@N evaluation."""

from __future__ import annotations

import csv
import io
import json
import os
import platform
import re
import struct
import time
from dataclasses import dataclass, field
from decimal import ROUND_CEILING, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from .aggregation import reduce_dim

STORE_MAGIC = b"EPD1"
HEADER_SIZE = 64
NORM_TOL = 1e-5


class StoreFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DescriptorStore:
    """Immutable set of unit-norm descriptor rows with unique integer ids.

    ``metadata`` is a flat str->str mapping; geo coordinates for radius
    criteria travel separately as ``positions`` (``[count, 2]`` lat/lon metres).
    """

    rows: np.ndarray            # float32 [count, dim]
    ids: np.ndarray             # int64 [count]
    metadata: dict = field(default_factory=dict)
    positions: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    def truncated(self, dim: int) -> "DescriptorStore":
        rows = reduce_dim(self.rows.astype(np.float64), dim).astype(np.float32) if self.count else \
            np.zeros((0, dim), np.float32)
        return DescriptorStore(rows, self.ids, dict(self.metadata, dim=str(dim)), self.positions)


def build_store(descriptors, ids, metadata: dict | None = None, positions=None) -> DescriptorStore:
    rows = np.asarray(descriptors, dtype=np.float32)
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if rows.ndim != 2:
        if rows.size == 0:
            rows = rows.reshape(0, 0)
        else:
            raise ValueError("descriptors must be a [count, dim] matrix")
    if len(rows) != len(ids):
        raise ValueError(f"{len(rows)} descriptors but {len(ids)} ids")
    uniq, counts = np.unique(ids, return_counts=True)
    if np.any(counts > 1):
        raise ValueError(f"duplicate ids: {uniq[counts > 1].tolist()[:10]}")
    if len(rows):
        norms = np.linalg.norm(rows.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1) > NORM_TOL)
        if len(bad):
            raise ValueError(f"rows not unit-norm (±{NORM_TOL}): indices {bad.tolist()[:10]}")
    meta = {str(k): str(v) for k, v in (metadata or {}).items()}
    for k, v in meta.items():
        if "\n" in k or "=" in k or "\n" in v:
            raise ValueError(f"metadata key/value not representable: {k!r}")
    if positions is not None:
        positions = np.asarray(positions, dtype=np.float64).reshape(len(ids), 2)
    rows.setflags(write=False)
    ids.setflags(write=False)
    return DescriptorStore(rows, ids, meta, positions)


def _meta_blob(store: DescriptorStore) -> bytes:
    meta = dict(store.metadata)
    if store.positions is not None:
        meta["positions"] = json.dumps(store.positions.tolist())
    return "".join(f"{k}={v}\n" for k, v in sorted(meta.items())).encode("utf-8")


def store_bytes(store: DescriptorStore) -> bytes:
    """Serialize: a 64-byte header, ``u64 id + dim f32`` rows, then the metadata block.

    Header: magic, u32 dim, u64 count, u32 metadata length, u32 metadata offset,
    zero padding. The metadata block sits after the rows so the row section
    always starts at byte 64.
    """
    meta = _meta_blob(store)
    row_bytes = 8 + 4 * store.dim
    head = STORE_MAGIC + struct.pack("<IQII", store.dim, store.count, len(meta),
                                     HEADER_SIZE + store.count * row_bytes)
    head = head.ljust(HEADER_SIZE, b"\0")
    rec = np.zeros(store.count, dtype=[("id", "<u8"), ("v", "<f4", (store.dim,))])
    rec["id"] = store.ids
    rec["v"] = store.rows
    return head + rec.tobytes() + meta


def save_store(path, store: DescriptorStore) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(store_bytes(store))
    os.replace(tmp, path)


def load_store(path) -> DescriptorStore:
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE or data[:4] != STORE_MAGIC:
        raise StoreFormatError(f"{path}: not a descriptor store")
    dim, count, mlen, moff = struct.unpack_from("<IQII", data, 4)
    row_bytes = 8 + 4 * dim
    if moff != HEADER_SIZE + count * row_bytes or len(data) != moff + mlen:
        raise StoreFormatError(f"{path}: size mismatch (truncated or corrupt)")
    rec = np.frombuffer(data, dtype=[("id", "<u8"), ("v", "<f4", (dim,))], count=count,
                        offset=HEADER_SIZE)
    meta = {}
    for line in data[moff:].decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        meta[k] = v
    positions = meta.pop("positions", None)
    if positions is not None:
        positions = np.array(json.loads(positions), dtype=np.float64).reshape(count, 2)
    return build_store(rec["v"].copy().reshape(count, dim), rec["id"].astype(np.int64), meta, positions)


# -- search ---------------------------------------------------------------------------

def scores(store: DescriptorStore, q: np.ndarray) -> np.ndarray:
    # an elementwise product summed per row rounds identical rows identically;
    # a BLAS matrix-vector product may not, which would break exact ties
    return (store.rows.astype(np.float64) * np.asarray(q, dtype=np.float64)).sum(axis=1)


def rank(score: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Row order by descending score, ties by ascending id."""
    return np.lexsort((ids, -score))


def query(store: DescriptorStore, q, k: int) -> list[tuple[int, float]]:
    """Exact top-``k`` ``(id, cosine)`` pairs, descending; ties go to the smaller id."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (store.dim,):
        raise ValueError(f"query dim {q.shape} does not match store dim {store.dim}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if abs(np.linalg.norm(q) - 1) > NORM_TOL:
        raise ValueError("query must be unit-norm")
    s = scores(store, q)
    order = rank(s, store.ids)[:k]
    return [(int(store.ids[i]), float(s[i])) for i in order]


# -- positive criteria ----------------------------------------------------------------

@dataclass(frozen=True)
class SamePlaceId:
    def positives(self, q_store, q_index, db_store) -> np.ndarray:
        return db_store.ids == q_store.ids[q_index]

    def __str__(self):
        return "same"


@dataclass(frozen=True)
class RadiusMeters:
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("radius must be positive")

    def positives(self, q_store, q_index, db_store) -> np.ndarray:
        if q_store.positions is None or db_store.positions is None:
            raise ValueError("radius criterion needs geo positions on both stores")
        d = np.hypot(*(db_store.positions - q_store.positions[q_index]).T)
        return d <= self.r

    def __str__(self):
        return f"radius:{self.r:g}"


@dataclass(frozen=True)
class IndexWindow:
    """Positive when the database frame index is within ``w`` of the query's."""

    w: int

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("window must be >= 0")

    def positives(self, q_store, q_index, db_store) -> np.ndarray:
        return np.abs(db_store.ids - q_store.ids[q_index]) <= self.w

    def __str__(self):
        return f"window:{self.w}"


def parse_criterion(text: str):
    text = text.strip()
    if text == "same":
        return SamePlaceId()
    m = re.fullmatch(r"radius:([0-9.eE+-]+)", text)
    if m:
        return RadiusMeters(float(m.group(1)))
    m = re.fullmatch(r"window:(\d+)", text)
    if m:
        return IndexWindow(int(m.group(1)))
    raise ValueError(f"unknown criterion {text!r} (use same, radius:<m>, window:<n>)")


# -- recall ----------------------------------------------------------------------------

@dataclass
class QueryMatch:
    query_id: int
    top_ids: list[int]
    correct: list[bool]


@dataclass
class RecallReport:
    recall: dict[int, float]
    matches: list[QueryMatch]
    criterion: str
    n_queries: int
    n_db: int
    n_excluded: int

    def to_json(self) -> str:
        return json.dumps({
            "criterion": self.criterion, "n_queries": self.n_queries, "n_db": self.n_db,
            "n_excluded": self.n_excluded,
            "recall": {str(n): v for n, v in self.recall.items()},
            "matches": [{"query_id": m.query_id, "top_ids": m.top_ids, "correct": m.correct}
                        for m in self.matches],
        }, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["criterion", "n", "recall", "n_queries", "n_db", "n_excluded"])
        for n, v in self.recall.items():
            w.writerow([self.criterion, n, repr(v), self.n_queries, self.n_db, self.n_excluded])
        return buf.getvalue()


def recall_at_n(q_store: DescriptorStore, db_store: DescriptorStore, criterion,
                ns: Sequence[int] = (1, 5, 10)) -> RecallReport:
    """Percent of queries with at least one positive among their top-N results.

    Queries without any positive in the database are excluded from the
    denominator and counted in ``n_excluded``.
    """
    if q_store.dim != db_store.dim:
        raise ValueError("query and database dims differ")
    ns = sorted(set(int(n) for n in ns))
    kmax = max(ns)
    db_rows = db_store.rows.astype(np.float64)
    hits = {n: 0 for n in ns}
    matches, excluded = [], 0
    for i in range(q_store.count):
        pos = criterion.positives(q_store, i, db_store)
        if not pos.any():
            excluded += 1
            continue
        sims = (db_rows * q_store.rows[i].astype(np.float64)).sum(axis=1)
        order = rank(sims, db_store.ids)[:kmax]
        flags = pos[order]
        matches.append(QueryMatch(int(q_store.ids[i]), db_store.ids[order].tolist(), flags.tolist()))
        for n in ns:
            hits[n] += bool(flags[:n].any())
    counted = q_store.count - excluded
    recall = {n: (100.0 * hits[n] / counted if counted else 0.0) for n in ns}
    return RecallReport(recall, matches, str(criterion), counted, db_store.count, excluded)


@dataclass
class SweepRow:
    dim: int
    report: RecallReport
    delta_recall1: float


def sweep_dims(q_store: DescriptorStore, db_store: DescriptorStore, dims: Sequence[int],
               criterion) -> list[SweepRow]:
    """Recall after truncate-and-renormalize to each dim, with first differences of R@1."""
    dims = [int(d) for d in dims]
    if len(set(dims)) != len(dims):
        raise ValueError("duplicate dims")
    if dims != sorted(dims, reverse=True):
        raise ValueError("dims must be in descending order")
    if dims and dims[0] > q_store.dim:
        raise ValueError(f"dim {dims[0]} exceeds native dim {q_store.dim}")
    out, prev = [], None
    for d in dims:
        q, db = (q_store, db_store) if d == q_store.dim else (q_store.truncated(d), db_store.truncated(d))
        rep = recall_at_n(q, db, criterion)
        out.append(SweepRow(d, rep, 0.0 if prev is None else rep.recall[1] - prev))
        prev = rep.recall[1]
    return out


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dim", "recall1", "recall5", "recall10", "delta_recall1"])
    for r in rows:
        rec = r.report.recall
        w.writerow([r.dim, rec.get(1), rec.get(5), rec.get(10), r.delta_recall1])
    return buf.getvalue()


# -- benchmarking and sizing --------------------------------------------------------

def machine_info() -> dict:
    return {"machine": platform.machine(), "processor": platform.processor() or "unknown",
            "python": platform.python_version(), "numpy": np.__version__,
            "cpu_count": str(os.cpu_count())}


@dataclass
class BenchResult:
    mean_ms: float
    std_ms: float
    reps: int
    machine: dict


def bench_encode(model, images: np.ndarray, warmup: int = 3, reps: int = 10) -> BenchResult:
    """Per-image wall-clock encoding time at batch size 1."""
    from .backbone import encode

    if warmup < 3 or reps < 10:
        raise ValueError("need warmup >= 3 and reps >= 10")
    images = np.asarray(images)
    for i in range(warmup):
        encode(model, images[i % len(images)])
    times = []
    for i in range(reps):
        t0 = time.perf_counter()
        encode(model, images[i % len(images)])
        times.append((time.perf_counter() - t0) * 1e3)
    return BenchResult(float(np.mean(times)), float(np.std(times)), reps, machine_info())


def estimate_storage(area_km2, km2_per_image, dim: int, bytes_per_value) -> tuple[int, int]:
    """``(ceil(area / coverage), images * dim * bytes)`` in exact decimal arithmetic."""
    area, per, bpv = Decimal(str(area_km2)), Decimal(str(km2_per_image)), Decimal(str(bytes_per_value))
    if area <= 0 or per <= 0 or dim <= 0 or bpv <= 0:
        raise ValueError("all inputs must be positive")
    n = int((area / per).to_integral_value(rounding=ROUND_CEILING))
    return n, int((n * dim * bpv).to_integral_value(rounding=ROUND_CEILING))
