"""Exact nearest-neighbour search over unit descriptors, recall@k and localization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import UsageError
from .numerics import DimensionError

DEFAULT_DIST_THRESH = 3.0
UNIT_NORM_TOL = 1e-5


@dataclass(frozen=True)
class MatchResult:
    """Ranked candidates for one query, nearest first."""

    frame_ids: np.ndarray
    distances: np.ndarray
    poses: np.ndarray


class DescriptorIndex:
    """Immutable exhaustive index; rows keep insertion order, which breaks distance ties."""

    def __init__(self, descriptors, poses, frame_ids=None):
        X = np.array(descriptors, dtype=np.float64)
        P = np.array(poses, dtype=np.float64)
        if X.ndim != 2 or len(X) == 0:
            raise DimensionError(f"index needs a nonempty N x d descriptor matrix, got shape {X.shape}")
        if P.shape != (len(X), 2):
            raise DimensionError(f"expected {len(X)} x 2 poses, got {P.shape}")
        norms = np.linalg.norm(X, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise DimensionError("index descriptors must be unit-norm")
        ids = np.arange(len(X)) if frame_ids is None else np.array(frame_ids, dtype=np.int64)
        if ids.shape != (len(X),):
            raise DimensionError(f"expected {len(X)} frame ids, got {ids.shape}")
        self.descriptors, self.poses, self.frame_ids = X, P, ids
        self._sq = np.einsum("ij,ij->i", X, X)
        for a in (self.descriptors, self.poses, self.frame_ids, self._sq):
            a.setflags(write=False)

    def __len__(self) -> int:
        return len(self.descriptors)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def distances(self, q: np.ndarray) -> np.ndarray:
        """Euclidean distance from ``q`` to every row."""
        q = np.asarray(q, dtype=np.float64)
        if q.shape[-1] != self.dim:
            raise DimensionError(f"query has dimension {q.shape[-1]}, index has {self.dim}")
        d2 = self._sq - 2.0 * (q @ self.descriptors.T) + np.einsum("...i,...i->...", q, q)[..., None]
        return np.sqrt(np.maximum(d2, 0.0))


def build_index(entries: Sequence[tuple[np.ndarray, np.ndarray, int]]) -> DescriptorIndex:
    """Index from ``(descriptor, pose, frame_id)`` triples."""
    if not entries:
        raise UsageError("cannot build an index from zero entries")
    dims = {len(e[0]) for e in entries}
    if len(dims) != 1:
        raise DimensionError(f"descriptors of mixed dimensions {sorted(dims)}")
    desc, poses, ids = zip(*entries)
    return DescriptorIndex(np.stack(desc), np.stack(poses), np.array(ids))


def query(index: DescriptorIndex, q: np.ndarray, topk: int) -> MatchResult:
    return query_batch(index, np.asarray(q)[None], topk)[0]


def query_batch(index: DescriptorIndex, Q: np.ndarray, topk: int) -> list[MatchResult]:
    """Top-``topk`` matches for each row of ``Q``."""
    if not 1 <= topk <= len(index):
        raise UsageError(f"topk must be in [1, {len(index)}], got {topk}")
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2:
        raise DimensionError(f"queries must be M x d, got {Q.shape}")
    D = index.distances(Q)
    out = []
    for row in D:
        if topk < len(row):
            # partition for speed, then stable-sort the survivors so ties keep index order
            cut = np.partition(row, topk - 1)[topk - 1]
            cand = np.flatnonzero(row <= cut)
        else:
            cand = np.arange(len(row))
        order = cand[np.argsort(row[cand], kind="stable")][:topk]
        out.append(MatchResult(index.frame_ids[order], row[order], index.poses[order]))
    return out


def recall_at_k(results: Sequence[MatchResult], query_poses, k: int,
                dist_thresh: float = DEFAULT_DIST_THRESH) -> float:
    """Fraction of queries with any of the top ``k`` poses within ``dist_thresh`` metres."""
    if not results:
        raise UsageError("recall needs at least one query result")
    poses = np.asarray(query_poses, dtype=np.float64)
    if len(poses) != len(results):
        raise DimensionError(f"{len(results)} results but {len(poses)} query poses")
    if k < 1 or dist_thresh <= 0:
        raise UsageError("k must be >= 1 and dist_thresh > 0")
    hits = 0
    for res, p in zip(results, poses):
        ground = np.linalg.norm(res.poses[:k] - p, axis=1)
        hits += bool(np.any(ground <= dist_thresh))
    return hits / len(results)


def localize(result: MatchResult) -> np.ndarray:
    """Pose of the rank-1 candidate."""
    if len(result.frame_ids) == 0:
        raise UsageError("cannot localize from an empty result")
    return result.poses[0].copy()


def evaluate_recall(index: DescriptorIndex, queries: np.ndarray, query_poses,
                    ks: Sequence[int] = (1, 5, 10), dist_thresh: float = DEFAULT_DIST_THRESH) -> dict[int, float]:
    """recall@k for every ``k`` in ``ks`` (each clipped to the index size)."""
    kmax = min(max(ks), len(index))
    results = query_batch(index, queries, kmax)
    return {k: recall_at_k(results, query_poses, min(k, kmax), dist_thresh) for k in ks}
