"""
Moment caption selection and the end-to-end captioned moment pipeline.

Nouns and verbs from the subtitles are ranked by cosine similarity with the
pooled moment feature; the top ones are joined (nouns first, each group by
descending score) into a pseudo caption.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .embed import lookup, pool_moment
from .errors import ConfigError, DimMismatch, EmptyCaption, NoCandidateWords
from .grounding import VideoMeta, frames_to_interval
from .lexemes import Pos, SubtitleWord, extract_candidates
from .momentgen import Moment, Strategy, augment_with_index, kmeans, labels_to_moments, select
from .tensorio import check_matrix, uniform_sample_indices


@dataclass(frozen=True)
class ScoredWord:
    token: str
    pos: Pos
    score: float


@dataclass
class CaptionedMoment:
    video_id: str
    moment: Moment
    tokens: list  # ScoredWord, nouns first
    caption: str
    meta: dict = field(default_factory=dict)
    t_start_s: Optional[float] = None
    t_end_s: Optional[float] = None

    def to_record(self) -> dict:
        return {
            "video_id": self.video_id,
            "start_frame": self.moment.start,
            "end_frame": self.moment.end,
            "t_start_s": self.t_start_s,
            "t_end_s": self.t_end_s,
            "caption": self.caption,
            "tokens": [{"token": w.token, "pos": w.pos.value, "score": w.score}
                       for w in self.tokens],
            "config": self.meta,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CaptionedMoment":
        tokens = [ScoredWord(t["token"], Pos(t["pos"]), float(t["score"]))
                  for t in rec.get("tokens", [])]
        return cls(rec["video_id"], Moment(int(rec["start_frame"]), int(rec["end_frame"])),
                   tokens, rec["caption"], rec.get("config", {}),
                   rec.get("t_start_s"), rec.get("t_end_s"))


def score_words(moment_vec, words: Sequence[str], embeddings, pos: Pos = Pos.NOUN
                ) -> list[ScoredWord]:
    """Cosine of each word embedding with the (unit) moment vector."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if not words:
        return []
    vec = np.asarray(moment_vec, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] != len(words) or emb.shape[1] != vec.shape[0]:
        raise DimMismatch(f"{len(words)} words, embeddings {emb.shape}, moment {vec.shape}")
    norms = np.linalg.norm(emb, axis=1) * np.linalg.norm(vec)
    scores = np.clip(emb @ vec / norms, -1.0, 1.0)
    return [ScoredWord(w, pos, float(s)) for w, s in zip(words, scores)]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _top(scored: list, n: int) -> list:
    order = sorted(range(len(scored)), key=lambda i: (-scored[i].score, i))
    return [scored[i] for i in order[:n]]


def select_topk(scored_nouns: list, scored_verbs: list, n1: int = 5, n2: int = 3,
                mode: str = "fixed", *, moment_len: Optional[float] = None,
                ref_len: Optional[float] = None, seed=None) -> tuple[list, list]:
    """Choose nouns and verbs for one caption.

    mode="fixed" takes the top n1/n2 by score. mode="scaled" rescales the
    counts by moment_len / ref_len (half-up rounding, at least one word).
    mode="random" samples n1/n2 words uniformly, ignoring scores.
    """
    if n1 < 0 or n2 < 0:
        raise ValueError("n1 and n2 must be >= 0")
    counts = [(scored_nouns, n1), (scored_verbs, n2)]
    if mode == "fixed":
        return tuple(_top(s, n) for s, n in counts)
    if mode == "scaled":
        if not moment_len or not ref_len or moment_len <= 0 or ref_len <= 0:
            raise ValueError("scaled mode needs positive moment_len and ref_len")
        out = []
        for s, n in counts:
            eff = 0 if n == 0 else min(max(_round_half_up(n * moment_len / ref_len), 1), len(s))
            out.append(_top(s, eff))
        return tuple(out)
    if mode == "random":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        out = []
        for s, n in counts:
            picked = rng.choice(len(s), size=min(n, len(s)), replace=False) if s else []
            out.append(_top([s[i] for i in sorted(picked)], n))
        return tuple(out)
    raise ValueError(f"unknown selection mode {mode!r}")


def assemble_caption(nouns: Sequence[ScoredWord], verbs: Sequence[ScoredWord]) -> str:
    tokens = [w.token.lower() for w in list(nouns) + list(verbs)]
    if not tokens:
        raise EmptyCaption("no words selected for the caption")
    return " ".join(tokens)


@dataclass(frozen=True)
class CmgConfig:
    sample_frames: int = 500
    k: int = 4
    index_weight: float = 1.0
    max_iter: int = 100
    tol: float = 1e-6
    strategy: str = "random"
    n1: int = 5
    n2: int = 3
    mode: str = "fixed"
    ref_len: Optional[float] = None  # scaled mode; None = mean candidate length
    all_candidates: bool = False
    seed: int = 0
    stoplist: tuple = ()

    def __post_init__(self):
        if self.sample_frames < 1:
            raise ConfigError("sample_frames must be >= 1")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.index_weight < 0:
            raise ConfigError("index_weight must be >= 0")
        if self.n1 < 0 or self.n2 < 0:
            raise ConfigError("n1 and n2 must be >= 0")
        if self.mode not in ("fixed", "scaled", "random"):
            raise ConfigError(f"unknown caption mode {self.mode!r}")
        try:
            strat = Strategy(self.strategy)
        except ValueError:
            raise ConfigError(f"unknown selection strategy {self.strategy!r}") from None
        if strat not in (Strategy.RANDOM, Strategy.LONGEST, Strategy.DISTINCT):
            # the remaining strategies need a query or ground truth
            raise ConfigError(f"strategy {self.strategy!r} cannot run without annotations")

    def snapshot(self) -> dict:
        d = asdict(self)
        d["stoplist"] = list(self.stoplist)
        return d


def video_seed(seed: int, video_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(video_id.encode("utf-8"))])


def run_cmg(frames, meta: VideoMeta, words: Sequence[SubtitleWord], provider,
            config: CmgConfig = CmgConfig()) -> list[CaptionedMoment]:
    """Captioned moments for one video; frame indices refer to the input frames."""
    frames = check_matrix(frames).astype(np.float64)
    p = frames.shape[0]
    if p != meta.frame_count:
        raise DimMismatch(f"{meta.video_id}: {p} frames but frame_count {meta.frame_count}")
    cands_words = extract_candidates(words, config.stoplist)
    if cands_words.empty:
        raise NoCandidateWords(f"{meta.video_id}: subtitles contain no nouns or verbs")

    km_seq, sel_seq, word_seq = video_seed(config.seed, meta.video_id).spawn(3)
    idx = uniform_sample_indices(p, config.sample_frames)
    sampled = frames[idx]
    x = augment_with_index(sampled, config.index_weight)
    labels = kmeans(x, config.k, int(km_seq.generate_state(1)[0]),
                    config.max_iter, config.tol)
    cands = labels_to_moments(labels)
    if config.all_candidates:
        chosen = list(cands.moments)
    else:
        chosen = [select(cands, config.strategy, frames=sampled,
                         rng=np.random.default_rng(sel_seq))]

    noun_emb, noun_miss = lookup(provider, cands_words.nouns)
    verb_emb, verb_miss = lookup(provider, cands_words.verbs)
    nouns = [t for t in cands_words.nouns if t not in set(noun_miss)]
    verbs = [t for t in cands_words.verbs if t not in set(verb_miss)]
    if not nouns and not verbs:
        raise NoCandidateWords(f"{meta.video_id}: no candidate word has an embedding")

    ref_len = config.ref_len or float(np.mean([m.length for m in cands.moments]))
    word_rng = np.random.default_rng(word_seq)
    out = []
    for m in chosen:
        vec = pool_moment(sampled, m)
        sn = score_words(vec, nouns, noun_emb, Pos.NOUN)
        sv = score_words(vec, verbs, verb_emb, Pos.VERB)
        top_n, top_v = select_topk(sn, sv, config.n1, config.n2, config.mode,
                                   moment_len=m.length, ref_len=ref_len, seed=word_rng)
        caption = assemble_caption(top_n, top_v)
        # back to original frame indices
        start = int(idx[m.start])
        end = int(idx[m.end]) if m.end < len(idx) else p
        orig = Moment(start, end)
        interval = frames_to_interval(orig, meta)
        out.append(CaptionedMoment(meta.video_id, orig, list(top_n) + list(top_v), caption,
                                   config.snapshot(), interval.t_start, interval.t_end))
    return out
