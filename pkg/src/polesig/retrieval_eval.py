"""Cross-session retrieval evaluation and the handcrafted baseline.

Observations are embedded into a descriptor database; each query ranks
eligible database entries (those from other sessions) by ascending
distance with ties broken by database index, and Recall@{1,5,10} plus
mean reciprocal rank are computed from the rank of the first entry with
the query's pole id.

The learning-free baseline scores two occupancy images by the minimum
Hamming distance over all circular column shifts, computed exactly via
FFT cross-correlation rounded back to integers.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ProtocolError, ShapeError
from .pole_image import PoleImage
from .training import Observation, ObservationSet
from . import encoder_net
from .encoder_net import EncoderParams

DB_MAGIC = b"PIDB"
DB_VERSION = 1
RECALL_KS = (1, 5, 10)


# ---------------------------------------------------------------------------
# Descriptor database
# ---------------------------------------------------------------------------


@dataclass
class DescriptorDB:
    dim: int
    pole_ids: np.ndarray  # (N,) int64
    session_ids: np.ndarray  # (N,) int64
    vectors: np.ndarray  # (N, dim) float64, unit rows

    def __post_init__(self):
        self.pole_ids = np.asarray(self.pole_ids, dtype=np.int64)
        self.session_ids = np.asarray(self.session_ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        n = len(self.pole_ids)
        if self.vectors.shape != (n, self.dim) or len(self.session_ids) != n:
            raise ValueError("inconsistent descriptor database shapes")
        keys = set(zip(self.pole_ids.tolist(), self.session_ids.tolist()))
        if len(keys) != n:
            raise ValueError("duplicate (pole_id, session_id) in descriptor database")

    def __len__(self) -> int:
        return len(self.pole_ids)


def embed_all(params: EncoderParams, obs: ObservationSet, batch_size: int = 64) -> DescriptorDB:
    """One descriptor per observation, in input order."""
    if len(obs) and obs.image_shape != params.input_shape:
        raise ShapeError(f"images are {obs.image_shape}, encoder expects {params.input_shape}")
    chunks = []
    images = obs.images_array().astype(np.float64) if len(obs) else np.zeros((0,) + params.input_shape)
    for start in range(0, len(obs), batch_size):
        chunks.append(encoder_net.forward(params, images[start : start + batch_size]))
    vectors = np.vstack(chunks) if chunks else np.zeros((0, params.emb_dim))
    return DescriptorDB(
        dim=params.emb_dim,
        pole_ids=np.array([ob.pole_id for ob in obs.observations], dtype=np.int64),
        session_ids=np.array([ob.session_id for ob in obs.observations], dtype=np.int64),
        vectors=vectors,
    )


def rank(query: np.ndarray, db: DescriptorDB) -> np.ndarray:
    """Indices of db entries by ascending L2 distance; ties keep db order."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (db.dim,):
        raise ShapeError(f"query has shape {q.shape}, database dim is {db.dim}")
    dists = np.linalg.norm(db.vectors - q, axis=1)
    return np.argsort(dists, kind="stable")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    recall_at: dict[int, float]
    mrr: float
    per_query_rank: list[tuple[int, int]]  # (pole_id, rank of first correct match)


def make_descriptor_matcher(params: EncoderParams, db: DescriptorDB):
    """Distance matrix of query embeddings vs database descriptors."""

    def matcher(query_set: ObservationSet) -> np.ndarray:
        qdb = embed_all(params, query_set)
        if qdb.dim != db.dim:
            raise ShapeError(f"query descriptors are {qdb.dim}-D, database is {db.dim}-D")
        # ||a - b||^2 = 2 - 2 a.b for unit vectors; keep the explicit norm
        # so the matcher stays valid for degenerate (zero) descriptors too
        diffs = qdb.vectors[:, None, :] - db.vectors[None, :, :]
        return np.linalg.norm(diffs, axis=2)

    return matcher


def make_baseline_matcher(db_images: ObservationSet):
    """Shift-minimized Hamming distance matrix against db-side images."""
    stack = db_images.images_array()
    db_counts = stack.sum(axis=(1, 2)).astype(np.int64)
    db_fft = np.fft.rfft(stack.astype(np.float64), axis=2)

    def matcher(query_set: ObservationSet) -> np.ndarray:
        if query_set.image_shape != db_images.image_shape:
            raise ValueError(
                f"query images {query_set.image_shape} differ from db images {db_images.image_shape}"
            )
        rows, cols = db_images.image_shape
        out = np.empty((len(query_set), len(db_images)))
        for qi, ob in enumerate(query_set.observations):
            a = ob.image.grid.astype(np.float64)
            fa = np.fft.rfft(a, axis=1)
            corr = np.fft.irfft(fa[None] * np.conj(db_fft), n=cols, axis=2)
            overlaps = np.rint(corr.sum(axis=1))  # (n_db, cols), exact integers
            best = overlaps.max(axis=1)
            out[qi] = (int(a.sum()) + db_counts - 2 * best) / (rows * cols)
        return out

    return matcher


def shift_invariant_distance(img_a: PoleImage, img_b: PoleImage) -> float:
    """Min over circular column shifts of normalized Hamming distance.

    Exact: binary overlap counts recovered from the FFT correlation are
    rounded back to integers, so d(A, A) is exactly 0 and the function
    is exactly symmetric.
    """
    if img_a.grid.shape != img_b.grid.shape:
        raise ValueError(f"image shapes differ: {img_a.grid.shape} vs {img_b.grid.shape}")
    a = img_a.grid.astype(np.float64)
    b = img_b.grid.astype(np.float64)
    rows, cols = a.shape
    corr = np.fft.irfft(np.fft.rfft(a, axis=1) * np.conj(np.fft.rfft(b, axis=1)), n=cols, axis=1)
    overlaps = np.rint(corr.sum(axis=0))
    best = overlaps.max()
    return float((a.sum() + b.sum() - 2 * best) / (rows * cols))


def evaluate(query_set: ObservationSet, db: DescriptorDB | ObservationSet, matcher) -> EvalReport:
    """Cross-session retrieval: db entries sharing a query's session are excluded.

    db supplies the entry metadata; it may be a DescriptorDB or, for
    image-space matchers like the baseline, the db-side ObservationSet.
    """
    if isinstance(db, ObservationSet):
        db_pole_ids = np.array([ob.pole_id for ob in db.observations], dtype=np.int64)
        db_session_ids = np.array([ob.session_id for ob in db.observations], dtype=np.int64)
    else:
        db_pole_ids, db_session_ids = db.pole_ids, db.session_ids
    distances = np.asarray(matcher(query_set), dtype=np.float64)
    if distances.shape != (len(query_set), len(db_pole_ids)):
        raise ValueError(
            f"matcher returned shape {distances.shape}, expected ({len(query_set)}, {len(db_pole_ids)})"
        )

    per_query_rank: list[tuple[int, int]] = []
    for qi, ob in enumerate(query_set.observations):
        eligible = np.nonzero(db_session_ids != ob.session_id)[0]
        correct = db_pole_ids[eligible] == ob.pole_id
        if not correct.any():
            raise ProtocolError(
                f"query pole {ob.pole_id} (session {ob.session_id}) has no "
                f"correct entry in any other session"
            )
        order = np.argsort(distances[qi, eligible], kind="stable")
        first = int(np.nonzero(correct[order])[0][0]) + 1
        per_query_rank.append((int(ob.pole_id), first))

    ranks = np.array([r for _, r in per_query_rank], dtype=np.float64)
    recall_at = {k: float(np.mean(ranks <= k)) for k in RECALL_KS}
    return EvalReport(recall_at=recall_at, mrr=float(np.mean(1.0 / ranks)), per_query_rank=per_query_rank)


def write_report(report: EvalReport, path) -> None:
    payload = {
        "recall_at": {str(k): report.recall_at[k] for k in sorted(report.recall_at)},
        "mrr": report.mrr,
        "per_query_rank": [[pid, r] for pid, r in report.per_query_rank],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def read_report(path) -> EvalReport:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return EvalReport(
        recall_at={int(k): float(v) for k, v in payload["recall_at"].items()},
        mrr=float(payload["mrr"]),
        per_query_rank=[(int(p), int(r)) for p, r in payload["per_query_rank"]],
    )


# ---------------------------------------------------------------------------
# Descriptor DB file format
# ---------------------------------------------------------------------------


def write_db(db: DescriptorDB, path) -> None:
    """PIDB: header (magic, version, dim, count) + per-entry id/session/f32 values."""
    if np.any(db.pole_ids < 0):
        raise ValueError("cannot persist unlabeled (negative) pole ids")
    with open(path, "wb") as fh:
        fh.write(DB_MAGIC)
        fh.write(struct.pack("<III", DB_VERSION, db.dim, len(db)))
        for pid, sid, vec in zip(db.pole_ids, db.session_ids, db.vectors):
            fh.write(struct.pack("<QI", int(pid), int(sid)))
            fh.write(np.asarray(vec, dtype="<f4").tobytes())


def read_db(path) -> DescriptorDB:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != DB_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r} (expected {DB_MAGIC!r})")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)")
    version, dim, count = struct.unpack_from("<III", data, 4)
    if version != DB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    record = 12 + 4 * dim
    expected = 16 + record * count
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {count} records of dim {dim}, got {len(data)}")

    pole_ids = np.empty(count, dtype=np.int64)
    session_ids = np.empty(count, dtype=np.int64)
    vectors = np.empty((count, dim), dtype=np.float64)
    offset = 16
    for i in range(count):
        pid, sid = struct.unpack_from("<QI", data, offset)
        offset += 12
        vectors[i] = np.frombuffer(data[offset : offset + 4 * dim], dtype="<f4")
        offset += 4 * dim
        pole_ids[i] = pid
        session_ids[i] = sid
    return DescriptorDB(dim=dim, pole_ids=pole_ids, session_ids=session_ids, vectors=vectors)
