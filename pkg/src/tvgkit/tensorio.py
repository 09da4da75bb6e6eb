"""
Embedding matrices on disk and in memory.

Matrices are plain 2-D numpy arrays. Files use the ATVG layout::

    bytes 0-3    magic b"ATVG"
    bytes 4-7    version, u32 little-endian (always 1)
    bytes 8-11   rows, u32
    bytes 12-15  cols, u32
    bytes 16-    rows*cols float32 little-endian, row-major

Storage is 32-bit; everything numeric downstream runs in 64-bit.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagic, DimMismatch, DimZero, IoFailure, NonFinite, Truncated

MAGIC = b"ATVG"
VERSION = 1
HEADER = struct.Struct("<4sIII")
_F32 = np.dtype("<f4")


def check_matrix(matrix) -> np.ndarray:
    """Validate FeatureMatrix invariants and return the input as a 2-D array."""
    arr = np.asarray(matrix)
    if arr.ndim != 2:
        raise DimMismatch(f"expected a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DimZero(f"matrix has a zero dimension: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFinite("matrix contains NaN or Inf")
    return arr


def encode_matrix(matrix) -> bytes:
    arr = check_matrix(matrix)
    with np.errstate(over="ignore"):
        payload = np.ascontiguousarray(arr, dtype=_F32)
    # float64 values beyond float32 range overflow on the cast
    if not np.all(np.isfinite(payload)):
        raise NonFinite("matrix values overflow float32 storage")
    rows, cols = payload.shape
    return HEADER.pack(MAGIC, VERSION, rows, cols) + payload.tobytes()


def decode_matrix(buf: bytes) -> np.ndarray:
    """Decode an ATVG byte string into a float32 array (rows, cols)."""
    if buf[:4] != MAGIC:
        raise BadMagic("missing ATVG magic")
    if len(buf) < HEADER.size:
        raise Truncated(f"header needs {HEADER.size} bytes, got {len(buf)}")
    _, version, rows, cols = HEADER.unpack_from(buf)
    if version != VERSION:
        raise BadMagic(f"unsupported ATVG version {version}")
    if rows == 0 or cols == 0:
        raise DimZero(f"header declares {rows}x{cols}")
    need = rows * cols * 4
    if len(buf) - HEADER.size < need:
        raise Truncated(f"payload has {len(buf) - HEADER.size} bytes, expected {need}")
    arr = np.frombuffer(buf, dtype=_F32, count=rows * cols, offset=HEADER.size)
    arr = arr.reshape(rows, cols).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFinite("stored matrix contains NaN or Inf")
    return arr


def read_feature_matrix(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    return decode_matrix(buf)


def write_feature_matrix(matrix, path) -> None:
    path = Path(path)
    data = encode_matrix(matrix)
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def uniform_sample_indices(rows: int, n: int) -> np.ndarray:
    """Source indices floor(i * rows / n); identity when n >= rows."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n >= rows:
        return np.arange(rows)
    return (np.arange(n) * rows) // n


def uniform_sample_rows(matrix, n: int) -> np.ndarray:
    arr = check_matrix(matrix)
    return arr[uniform_sample_indices(arr.shape[0], n)]


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray                 # (d,)
    components: np.ndarray           # (k, d), orthonormal rows
    explained_variance: np.ndarray   # (k,), non-increasing

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def save(self, path) -> None:
        try:
            with open(path, "wb") as fh:
                np.savez(fh, mean=self.mean, components=self.components,
                         explained_variance=self.explained_variance)
        except OSError as exc:
            raise IoFailure(f"{path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "PcaModel":
        try:
            with np.load(path) as z:
                return cls(z["mean"], z["components"], z["explained_variance"])
        except OSError as exc:
            raise IoFailure(f"{path}: {exc}") from exc


def _fix_sign(vec: np.ndarray) -> np.ndarray:
    # largest-magnitude coordinate made positive; first one wins on ties
    return -vec if vec[np.argmax(np.abs(vec))] < 0 else vec


def _complete_basis(basis: list[np.ndarray], d: int, k: int) -> list[np.ndarray]:
    """Extend orthonormal `basis` to k vectors by Gram-Schmidt over e_0, e_1, ..."""
    out = list(basis)
    for j in range(d):
        if len(out) >= k:
            break
        v = np.zeros(d)
        v[j] = 1.0
        for _ in range(2):  # re-orthogonalize once for stability
            for b in out:
                v -= (b @ v) * b
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            out.append(_fix_sign(v / norm))
    return out


def pca_fit(matrix, k: int) -> PcaModel:
    """Exact PCA via eigendecomposition of the sample covariance (ddof=1).

    Directions with (numerically) zero variance are replaced by a deterministic
    completion against the canonical basis, and report zero variance.
    """
    x = check_matrix(matrix).astype(np.float64)
    n, d = x.shape
    if n < 2:
        raise ValueError("pca_fit needs at least 2 rows")
    if not 1 <= k <= min(d, n):
        raise ValueError(f"k={k} must lie in [1, min(cols={d}, rows={n})]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    null_tol = max(evals[0], 0.0) * d * np.finfo(float).eps * 10
    keep = [_fix_sign(evecs[:, i]) for i in range(k) if evals[i] > null_tol]
    variances = [float(evals[i]) for i in range(len(keep))]
    comps = _complete_basis(keep, d, k)
    variances += [0.0] * (k - len(variances))
    return PcaModel(mean, np.array(comps), np.array(variances))


def pca_transform(model: PcaModel, matrix) -> np.ndarray:
    x = check_matrix(matrix).astype(np.float64)
    if x.shape[1] != model.dim:
        raise DimMismatch(f"matrix has {x.shape[1]} cols, model expects {model.dim}")
    return (x - model.mean) @ model.components.T


def pca_inverse(model: PcaModel, projected) -> np.ndarray:
    y = np.asarray(projected, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != model.k:
        raise DimMismatch(f"projection has shape {y.shape}, model has k={model.k}")
    return model.mean + y @ model.components
