"""
Token embeddings and the similarity machinery used for caption selection.

Two providers share one ``lookup`` contract:

* file: an ATVG matrix plus a JSON sidecar ``{"dim": n, "tokens": [...]}``
  where ``tokens[i]`` names row ``i``. The sidecar sits next to the matrix
  with its suffix replaced by ``.json``.
* http: ``POST {endpoint}/embed`` with ``{"texts": [...]}``, answered by
  ``{"embeddings": [[...], ...]}``. An inner ``null`` marks a text the
  service cannot embed; it is reported as missing.
"""
from __future__ import annotations

import json
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (ConfigError, DimMismatch, EmptyMoment, FormatError, HttpFailure,
                     IoFailure, MissingToken, RaggedResponse, StoreUnreadable, ZeroVector)
from .tensorio import read_feature_matrix, write_feature_matrix


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


class EmbeddingStore:
    """Immutable token -> vector map backed by a dense matrix."""

    def __init__(self, tokens: Sequence[str], vectors):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(tokens):
            raise DimMismatch(f"{len(tokens)} tokens vs vectors of shape {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise StoreUnreadable("store vectors must be finite")
        index = {}
        for i, tok in enumerate(tokens):
            if tok != tok.lower():
                raise StoreUnreadable(f"store token {tok!r} is not lowercase")
            if tok in index:
                raise StoreUnreadable(f"duplicate store token {tok!r}")
            index[tok] = i
        self.tokens = tuple(tokens)
        self.vectors = vectors
        self.vectors.setflags(write=False)
        self._index = index

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    def get(self, token: str) -> Optional[np.ndarray]:
        i = self._index.get(token)
        return None if i is None else self.vectors[i]

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        try:
            matrix = read_feature_matrix(path)
            side = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
        except (IoFailure, FormatError, OSError, json.JSONDecodeError) as exc:
            raise StoreUnreadable(f"{path}: {exc}") from exc
        tokens = side.get("tokens") if isinstance(side, dict) else None
        if not isinstance(tokens, list) or side.get("dim") != matrix.shape[1]:
            raise StoreUnreadable(f"{path}: sidecar does not match matrix {matrix.shape}")
        return cls(tokens, matrix)

    def save(self, path) -> None:
        write_feature_matrix(self.vectors, path)
        side = {"dim": self.dim, "tokens": list(self.tokens)}
        try:
            sidecar_path(path).write_text(json.dumps(side), encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"{sidecar_path(path)}: {exc}") from exc


@dataclass(frozen=True)
class ProviderConfig:
    mode: str = "file"
    path: Optional[str] = None
    endpoint: Optional[str] = None
    timeout_ms: int = 10_000
    missing_policy: str = "skip"
    dim: Optional[int] = None  # only used to shape empty http lookups

    def __post_init__(self):
        if self.mode not in ("file", "http"):
            raise ConfigError(f"provider mode must be 'file' or 'http', got {self.mode!r}")
        if self.missing_policy not in ("skip", "error"):
            raise ConfigError("missing_policy must be 'skip' or 'error'")
        if (self.path is None) == (self.endpoint is None):
            raise ConfigError("configure exactly one of path or endpoint")
        if self.mode == "file" and self.path is None:
            raise ConfigError("file provider needs a path")
        if self.mode == "http" and self.endpoint is None:
            raise ConfigError("http provider needs an endpoint")
        if self.timeout_ms <= 0:
            raise ConfigError("timeout_ms must be positive")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "path": self.path, "endpoint": self.endpoint,
                "timeout_ms": self.timeout_ms, "missing_policy": self.missing_policy,
                "dim": self.dim}


def http_embed(endpoint: str, texts: Sequence[str], timeout_ms: int = 10_000) -> list:
    """Call the embedding service; returns one vector (or None) per input text."""
    if not texts:
        raise ValueError("http_embed needs at least one text")
    url = endpoint.rstrip("/") + "/embed"
    body = json.dumps({"texts": list(texts)}).encode("utf-8")
    req = urllib.request.Request(url, data=body, method="POST",
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout_ms / 1000) as resp:
            status, raw = resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        raise HttpFailure(f"{url}: HTTP {exc.code}", status=exc.code) from exc
    except (urllib.error.URLError, TimeoutError, OSError) as exc:
        raise HttpFailure(f"{url}: {exc}") from exc
    if status != 200:
        raise HttpFailure(f"{url}: HTTP {status}", status=status)
    try:
        embeddings = json.loads(raw)["embeddings"]
    except (ValueError, KeyError, TypeError) as exc:
        raise HttpFailure(f"{url}: malformed response body") from exc
    if not isinstance(embeddings, list) or len(embeddings) != len(texts):
        raise HttpFailure(f"{url}: expected {len(texts)} embeddings")
    out, dim = [], None
    for vec in embeddings:
        if vec is None:
            out.append(None)
            continue
        if not isinstance(vec, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in vec):
            raise HttpFailure(f"{url}: embedding is not a numeric array")
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise RaggedResponse(f"{url}: embeddings of length {dim} and {len(vec)}")
        out.append(np.asarray(vec, dtype=np.float64))
    return out


class FileProvider:
    def __init__(self, config: ProviderConfig, store: Optional[EmbeddingStore] = None):
        self.config = config
        self.store = store if store is not None else EmbeddingStore.load(config.path)

    @property
    def dim(self) -> int:
        return self.store.dim

    def raw(self, tokens):
        return [self.store.get(t) for t in tokens]


class HttpProvider:
    def __init__(self, config: ProviderConfig):
        self.config = config

    @property
    def dim(self) -> Optional[int]:
        return self.config.dim

    def raw(self, tokens):
        if not tokens:
            return []
        return http_embed(self.config.endpoint, tokens, self.config.timeout_ms)


def open_provider(config: ProviderConfig):
    if config.mode == "file":
        return FileProvider(config)
    return HttpProvider(config)


def lookup(provider, tokens: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """Embed `tokens`; returns (L2-normalized rows of found tokens, missing tokens).

    `provider` is a ProviderConfig or an already opened provider (preferred
    when looking up repeatedly, so the file store is loaded once). Zero vectors
    cannot be normalized and count as missing.
    """
    if isinstance(provider, ProviderConfig):
        provider = open_provider(provider)
    tokens = list(tokens)
    rows, missing = [], []
    for tok, vec in zip(tokens, provider.raw(tokens)):
        norm = 0.0 if vec is None else float(np.linalg.norm(vec))
        if norm == 0.0:
            missing.append(tok)
        else:
            rows.append(vec / norm)
    if missing and provider.config.missing_policy == "error":
        raise MissingToken(f"no embedding for {missing}")
    if rows:
        return np.vstack(rows), missing
    return np.zeros((0, provider.dim or 0)), missing


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"cosine of shapes {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def pool_moment(frames, moment) -> np.ndarray:
    """Mean of frames[start:end], L2-normalized."""
    frames = np.asarray(frames, dtype=np.float64)
    start, end = moment.start, moment.end
    if not 0 <= start < end <= frames.shape[0]:
        raise EmptyMoment(f"moment [{start}, {end}) invalid for {frames.shape[0]} frames")
    mean = frames[start:end].mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise ZeroVector(f"moment [{start}, {end}) pools to a zero vector")
    return mean / norm
