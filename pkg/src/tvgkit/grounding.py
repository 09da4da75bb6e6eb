"""Temporal metrics and the non-parametric (max-similarity) grounder."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .embed import lookup
from .errors import EmptyEvaluation, NoResolvableTokens, OutOfRange
from .momentgen import (Moment, Strategy, brute_force, kmeans_moments, select, similarities,
                        sliding_window)
from .tensorio import check_matrix

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)


@dataclass(frozen=True)
class Interval:
    t_start: float
    t_end: float

    def __post_init__(self):
        if not (math.isfinite(self.t_start) and math.isfinite(self.t_end)):
            raise ValueError("interval bounds must be finite")
        if self.t_start < 0 or not self.t_start < self.t_end:
            raise ValueError(f"invalid interval [{self.t_start}, {self.t_end}]")

    @property
    def length(self) -> float:
        return self.t_end - self.t_start


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    duration_s: float
    frame_count: int

    def __post_init__(self):
        if not (math.isfinite(self.duration_s) and self.duration_s > 0):
            raise ValueError(f"{self.video_id}: duration_s must be finite and > 0")
        if self.frame_count < 1:
            raise ValueError(f"{self.video_id}: frame_count must be >= 1")


@dataclass
class EvalReport:
    n: int
    recall: dict  # threshold -> fraction
    miou: float

    def to_dict(self) -> dict:
        return {"n": self.n,
                "recall": {_fmt_threshold(t): r for t, r in sorted(self.recall.items())},
                "miou": self.miou}


def _fmt_threshold(t: float) -> str:
    return repr(float(t))


def tiou(a: Interval, b: Interval) -> float:
    inter = min(a.t_end, b.t_end) - max(a.t_start, b.t_start)
    if inter <= 0:
        return 0.0
    return inter / (max(a.t_end, b.t_end) - min(a.t_start, b.t_start))


def frames_to_interval(m: Moment, meta: VideoMeta) -> Interval:
    if m.end > meta.frame_count:
        raise OutOfRange(f"moment [{m.start}, {m.end}) beyond {meta.frame_count} frames")
    scale = meta.duration_s / meta.frame_count
    return Interval(m.start * scale, m.end * scale)


def evaluate(pairs: Sequence[tuple[Interval, Interval]],
             thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> EvalReport:
    """R@tIoU (strictly greater than each threshold) and mean tIoU."""
    if not pairs:
        raise EmptyEvaluation("no prediction/ground-truth pairs to evaluate")
    for t in thresholds:
        if not 0 < t < 1:
            raise ValueError(f"threshold {t} outside (0, 1)")
    ious = [tiou(pred, gt) for pred, gt in pairs]
    n = len(ious)
    recall = {float(t): sum(1 for v in ious if v > t) / n for t in thresholds}
    # fsum keeps the mean independent of pair order
    return EvalReport(n, recall, math.fsum(ious) / n)


@dataclass(frozen=True)
class GeneratorConfig:
    method: str = "kmeans"  # kmeans | sliding | brute
    k: int = 4
    index_weight: float = 1.0
    seed: int = 0
    max_iter: int = 100
    tol: float = 1e-6
    window: int = 8
    stride: int = 4
    min_len: int = 1
    step: int = 1

    def __post_init__(self):
        if self.method not in ("kmeans", "sliding", "brute"):
            raise ValueError(f"unknown candidate generator {self.method!r}")

    def generate(self, frames):
        p = frames.shape[0]
        if self.method == "kmeans":
            return kmeans_moments(frames, self.k, self.index_weight, self.seed,
                                  self.max_iter, self.tol)
        if self.method == "sliding":
            return sliding_window(p, self.window, self.stride)
        return brute_force(p, self.min_len, self.step)


def query_vector(provider, tokens: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """Mean of the found token embeddings, L2-normalized."""
    emb, missing = lookup(provider, tokens)
    if emb.shape[0] == 0:
        raise NoResolvableTokens(f"none of {list(tokens)} has an embedding")
    mean = emb.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise NoResolvableTokens(f"token embeddings of {list(tokens)} cancel out")
    return mean / norm, missing


def ground_query(frames, meta: VideoMeta, query_tokens: Sequence[str], provider,
                 gen: Optional[GeneratorConfig] = None) -> tuple[Interval, dict]:
    """Return the candidate moment most similar to the query, in seconds."""
    frames = check_matrix(frames).astype(np.float64)
    gen = gen or GeneratorConfig()
    q, missing = query_vector(provider, query_tokens)
    cands = gen.generate(frames)
    scores = similarities(frames, cands.moments, q)
    best = select(cands, Strategy.MAX_SIMILARITY, frames=frames, query_vec=q)
    i = cands.moments.index(best)
    diagnostics = {
        "candidates": [{"start_frame": m.start, "end_frame": m.end, "score": float(s)}
                       for m, s in zip(cands.moments, scores)],
        "best_index": i,
        "score": float(scores[i]),
        "moment": best,
        "missing_tokens": missing,
    }
    return frames_to_interval(best, meta), diagnostics
