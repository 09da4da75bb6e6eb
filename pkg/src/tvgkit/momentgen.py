"""
Candidate moment generation and selection.

Frame intervals are half-open ``[start, end)`` in frame indices throughout;
conversion to seconds happens in :mod:`tvgkit.grounding`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .embed import cosine, pool_moment
from .errors import KTooLarge, MissingContext
from .tensorio import check_matrix


@dataclass(frozen=True, order=True)
class Moment:
    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid moment [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start

    def iou(self, other: "Moment") -> float:
        inter = min(self.end, other.end) - max(self.start, other.start)
        if inter <= 0:
            return 0.0
        return inter / (max(self.end, other.end) - min(self.start, other.start))


@dataclass(frozen=True)
class CandidateSet:
    moments: tuple[Moment, ...]
    generator: str  # "kmeans" | "sliding" | "brute"

    def __post_init__(self):
        if not self.moments:
            raise ValueError("candidate set must be non-empty")

    def __len__(self):
        return len(self.moments)

    def __iter__(self):
        return iter(self.moments)


class Strategy(str, enum.Enum):
    RANDOM = "random"
    LONGEST = "longest"
    DISTINCT = "distinct"
    MAX_SIMILARITY = "max_similarity"
    PERFECT_BOUNDARY = "perfect_boundary"
    PERFECT_ALIGNMENT = "perfect_alignment"


def augment_with_index(frames, weight: float = 1.0) -> np.ndarray:
    """L2-normalize each row and append ``weight * i / (P - 1)`` as a last column."""
    x = check_matrix(frames).astype(np.float64)
    if weight < 0:
        raise ValueError("index weight must be nonnegative")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    p = x.shape[0]
    index = np.arange(p) / (p - 1) if p > 1 else np.zeros(1)
    return np.hstack([x, weight * index[:, None]])


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int
    history: list = field(default_factory=list)  # objective after each assignment


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _lloyd(x, centroids, max_iter, tol) -> KMeansResult:
    k = centroids.shape[0]
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _sq_dists(x, centroids)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(x)), labels].sum()))
        new = centroids.copy()
        served = d2[np.arange(len(x)), labels]
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                # empty cluster: move it onto the worst-served point
                far = served.argmax()
                new[j] = x[far]
                labels[far] = j
                served[far] = 0.0
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol:
            break
    d2 = _sq_dists(x, centroids)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(x)), labels].sum())
    history.append(inertia)
    return KMeansResult(labels, centroids, inertia, n_iter, history)


def kmeans_fit(points, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6,
               n_init: int = 10) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; best of `n_init` restarts.

    Restarts draw from independent child streams of `seed`, so the result is
    a deterministic function of (points, k, seed, max_iter, tol, n_init).
    """
    x = check_matrix(points).astype(np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > x.shape[0]:
        raise KTooLarge(f"k={k} exceeds {x.shape[0]} points")
    best = None
    for child in np.random.SeedSequence(seed).spawn(max(1, n_init)):
        rng = np.random.default_rng(child)
        res = _lloyd(x, _kmeans_pp(x, k, rng), max_iter, tol)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def kmeans(points, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6,
           n_init: int = 10) -> np.ndarray:
    return kmeans_fit(points, k, seed, max_iter, tol, n_init).labels


def labels_to_moments(labels: Sequence[int]) -> CandidateSet:
    """Each maximal run of equal labels becomes one moment."""
    labels = list(labels)
    if not labels:
        raise ValueError("labels must be non-empty")
    moments, start = [], 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            moments.append(Moment(start, i))
            start = i
    return CandidateSet(tuple(moments), "kmeans")


def kmeans_moments(frames, k: int = 4, index_weight: float = 1.0, seed: int = 0,
                   max_iter: int = 100, tol: float = 1e-6) -> CandidateSet:
    x = augment_with_index(frames, index_weight)
    return labels_to_moments(kmeans(x, k, seed, max_iter, tol))


def sliding_window(p: int, window: int = 8, stride: int = 4) -> CandidateSet:
    if p < 1 or window < 1 or stride < 1:
        raise ValueError("p, window and stride must be >= 1")
    if p < window:
        return CandidateSet((Moment(0, p),), "sliding")
    starts = range(0, p - window + 1, stride)
    return CandidateSet(tuple(Moment(s, s + window) for s in starts), "sliding")


def brute_force(p: int, min_len: int = 1, step: int = 1) -> CandidateSet:
    """Every [s, e) on the `step` grid with e - s >= min_len (the full 2-D map)."""
    if p < 1 or min_len < 1 or step < 1:
        raise ValueError("p, min_len and step must be >= 1")
    grid = range(0, p + 1, step)
    moments = tuple(Moment(s, e) for s in grid for e in grid if s < e and e - s >= min_len)
    if not moments:
        raise ValueError(f"no candidate of length >= {min_len} fits in {p} frames")
    return CandidateSet(moments, "brute")


def similarities(frames, moments: Sequence[Moment], query_vec) -> np.ndarray:
    return np.array([cosine(pool_moment(frames, m), query_vec) for m in moments])


def _argbest(moments: Sequence[Moment], scores) -> Moment:
    # highest score, then earliest start, then shortest
    best = min(range(len(moments)),
               key=lambda i: (-scores[i], moments[i].start, moments[i].length))
    return moments[best]


def select(candidates: CandidateSet, strategy, *, frames=None, query_vec=None,
           gt: Optional[Moment] = None, rng=None) -> Moment:
    """Pick one candidate moment according to `strategy`.

    `rng` (an int seed or a numpy Generator) drives the random strategy.
    """
    strategy = Strategy(strategy)
    moments = list(candidates.moments)

    def need(name, value):
        if value is None:
            raise MissingContext(f"{strategy.value} selection needs {name}")
        return value

    if strategy is Strategy.RANDOM:
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        return moments[int(gen.integers(len(moments)))]
    if strategy is Strategy.LONGEST:
        return _argbest(moments, [m.length for m in moments])
    if strategy is Strategy.DISTINCT:
        need("frames", frames)
        pooled = np.array([pool_moment(frames, m) for m in moments])
        dist = np.linalg.norm(pooled - pooled.mean(axis=0), axis=1)
        return _argbest(moments, dist)
    if strategy is Strategy.MAX_SIMILARITY:
        need("frames", frames)
        need("query_vec", query_vec)
        return _argbest(moments, similarities(frames, moments, query_vec))
    if strategy is Strategy.PERFECT_BOUNDARY:
        need("frames", frames)
        need("query_vec", query_vec)
        need("gt", gt)
        if gt not in moments:
            moments.append(gt)
        return _argbest(moments, similarities(frames, moments, query_vec))
    need("gt", gt)
    return _argbest(moments, [m.iou(gt) for m in moments])
