"""Descriptor database, exact top-K retrieval and the X2DB file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .detect2d import Keypoint2D
from .detect3d import Keypoint3D
from .errors import DataError, DimensionMismatch, EmptyInput

DB_MAGIC = b"X2DB"
DB_VERSION = 1
LEAF_SIZE = 16
BRUTE_FORCE_DIM = 32
_NORM_TOL = 1e-6


def similarity(p, q) -> float:
    """Euclidean distance between two descriptors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionMismatch(f"descriptor shapes differ: {p.shape} vs {q.shape}")
    return float(np.sqrt(((p - q) ** 2).sum()))


def _row_distances(X: np.ndarray, q: np.ndarray) -> np.ndarray:
    # the one distance formula shared by every search path, so ties compare equal
    return np.sqrt(((X - q) ** 2).sum(axis=-1))


@dataclass(frozen=True)
class MatchHypothesis:
    query: Keypoint2D
    candidates: tuple  # ((Keypoint3D, distance), ...) ascending

    def __post_init__(self):
        if len(self.candidates) < 1:
            raise ValueError("a hypothesis needs at least one candidate")


@dataclass(frozen=True, eq=False)
class DescriptorDB:
    keypoints: tuple
    descriptors: np.ndarray
    tree: cKDTree | None

    @property
    def D(self) -> int:
        return self.descriptors.shape[1]

    def __len__(self):
        return len(self.keypoints)


def build_index(entries, leafsize: int = LEAF_SIZE, brute_force_dim: int = BRUTE_FORCE_DIM) -> DescriptorDB:
    """Freeze (Keypoint3D, descriptor) pairs into a searchable database.

    A KD-tree is built when ``D <= brute_force_dim``; above that a linear scan
    is used. Both answer the same exact queries.

    Raises:
        EmptyInput: no entries.
        DimensionMismatch: descriptors of differing length.
        ValueError: a descriptor is not unit-norm.
    """
    entries = list(entries)
    if not entries:
        raise EmptyInput("cannot build an index from zero entries")
    dims = {np.asarray(d).shape for _, d in entries}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise DimensionMismatch(f"descriptors must share one 1-D shape, got {sorted(dims)}")
    X = np.array([np.asarray(d, dtype=np.float64) for _, d in entries])
    norms = np.linalg.norm(X, axis=1)
    if not np.all(np.abs(norms - 1.0) <= _NORM_TOL):
        raise ValueError("descriptors must be unit-norm")
    X.setflags(write=False)
    tree = cKDTree(X, leafsize=leafsize) if X.shape[1] <= brute_force_dim else None
    return DescriptorDB(tuple(kp for kp, _ in entries), X, tree)


def _select(X, q, idx, k):
    """Exact distances for candidate rows ``idx``; best k by (distance, index)."""
    idx = np.asarray(idx, dtype=np.int64)
    d = _row_distances(X[idx], q)
    order = np.lexsort((idx, d))[:k]
    return idx[order], d[order]


def knn_indices(db: DescriptorDB, query, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and distances of the exact K nearest entries.

    Ordered by ascending distance, ties by insertion index.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (db.D,):
        raise DimensionMismatch(f"query has shape {q.shape}, database dimension is {db.D}")
    k = min(K, len(db))
    X = db.descriptors
    if db.tree is None:
        return _select(X, q, np.arange(len(X)), k)
    dist, idx = db.tree.query(q, k=k)
    kth = float(np.atleast_1d(dist)[-1])
    # pull in every entry tied with the k-th so the index tie-break is honored
    ball = db.tree.query_ball_point(q, kth * (1 + 1e-9) + 1e-12)
    return _select(X, q, np.union1d(np.atleast_1d(idx), ball), k)


def knn(db: DescriptorDB, query, K: int = 5):
    """Exact top-K candidates as a list of (Keypoint3D, distance)."""
    idx, dist = knn_indices(db, query, K)
    return [(db.keypoints[i], float(d)) for i, d in zip(idx, dist)]


def knn_batch(db: DescriptorDB, queries: np.ndarray, K: int = 5, chunk: int = 256):
    """Exact top-K for many queries at once.

    Uses the Gram-matrix expansion to shortlist, then recomputes exact
    distances for every entry within a small margin of the shortlist's K-th
    distance, so results equal :func:`knn_indices` query by query.

    Returns:
        (idx, dist) arrays of shape (M, min(K, N)).
    """
    Qm = np.asarray(queries, dtype=np.float64)
    if Qm.ndim != 2 or Qm.shape[1] != db.D:
        raise DimensionMismatch(f"queries must be (M, {db.D})")
    if K < 1:
        raise ValueError("K must be >= 1")
    X = db.descriptors
    k = min(K, len(X))
    sq = (X * X).sum(1)
    out_i = np.empty((len(Qm), k), dtype=np.int64)
    out_d = np.empty((len(Qm), k))
    for s in range(0, len(Qm), chunk):
        q = Qm[s:s + chunk]
        d2 = sq[None, :] + (q * q).sum(1)[:, None] - 2.0 * q @ X.T
        kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
        for r in range(len(q)):
            cand = np.nonzero(d2[r] <= kth[r] + 1e-8)[0]
            out_i[s + r], out_d[s + r] = _select(X, q[r], cand, k)
    return out_i, out_d


def match_keypoints(db: DescriptorDB, keypoints, descriptors, K: int = 5, max_distance: float | None = None):
    """One :class:`MatchHypothesis` per 2D keypoint.

    ``max_distance`` optionally drops candidates farther than the threshold
    (disabled by default); keypoints left with no candidate are skipped.
    """
    if len(keypoints) == 0:
        return []
    idx, dist = knn_batch(db, np.asarray(descriptors), K)
    out = []
    for kp, ii, dd in zip(keypoints, idx, dist):
        cands = [(db.keypoints[i], float(d)) for i, d in zip(ii, dd)
                 if max_distance is None or d <= max_distance]
        if cands:
            out.append(MatchHypothesis(kp, tuple(cands)))
    return out


def _db_dtype(D: int) -> np.dtype:
    return np.dtype([("pos", "<f8", (3,)), ("saliency", "<f8"), ("desc", "<f8", (D,))])


def write_db(path, db: DescriptorDB) -> None:
    """Serialize to the little-endian X2DB format."""
    rec = np.zeros(len(db), dtype=_db_dtype(db.D))
    rec["pos"] = [kp.position for kp in db.keypoints]
    rec["saliency"] = [kp.saliency for kp in db.keypoints]
    rec["desc"] = db.descriptors
    with open(path, "wb") as fh:
        fh.write(DB_MAGIC + struct.pack("<IIQ", DB_VERSION, db.D, len(db)))
        fh.write(rec.tobytes())


def read_db(path) -> DescriptorDB:
    """Load an X2DB file and rebuild its index."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20 or raw[:4] != DB_MAGIC:
        raise DataError(f"{path}: not an X2DB file")
    version, D, count = struct.unpack("<IIQ", raw[4:20])
    if version != DB_VERSION:
        raise DataError(f"{path}: unsupported X2DB version {version}")
    dt = _db_dtype(D)
    if len(raw) != 20 + count * dt.itemsize:
        raise DataError(f"{path}: truncated or oversized X2DB payload")
    rec = np.frombuffer(raw, dtype=dt, count=count, offset=20)
    entries = [(Keypoint3D(r["pos"].copy(), float(r["saliency"])), r["desc"].copy()) for r in rec]
    return build_index(entries)
