"""
A small trainable grounding head with hand-written gradients.

Forward pass for a video F (P x D) and query vector q (D):

    e_i    = v_att . tanh(W_v f_i + W_t q)
    a      = softmax(e)
    pooled = sum_i a_i f_i
    h      = tanh(W1 [pooled; q] + b1)
    (c, w) = sigmoid(W2 h + b2)
    ts     = clamp(c - w/2, 0, 1 - eps)
    te     = clamp(c + w/2, ts + eps, 1)

Training minimizes reg + lambda * guide, where reg is the mean Huber loss of
the two normalized boundaries and guide is KL(ground-truth mask || attention).
A single additive attention block stands in for a full cross-attention stack.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateMask, DimMismatch, FormatError, IoFailure
from .momentgen import Moment
from .tensorio import decode_matrix, encode_matrix

EPS = 1e-4
ATT_FLOOR = 1e-12
PARAM_NAMES = ("W_v", "W_t", "v_att", "W1", "b1", "W2", "b2")


@dataclass
class HeadParams:
    W_v: np.ndarray    # (Dh, D)
    W_t: np.ndarray    # (Dh, D)
    v_att: np.ndarray  # (Dh,)
    W1: np.ndarray     # (H, 2D)
    b1: np.ndarray     # (H,)
    W2: np.ndarray     # (2, H)
    b2: np.ndarray     # (2,)

    @property
    def dims(self) -> dict:
        dh, d = self.W_v.shape
        return {"D": d, "D_h": dh, "H": self.W1.shape[0]}

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def map(self, fn) -> "HeadParams":
        return HeadParams(**{k: fn(v) for k, v in self.arrays().items()})

    def copy(self) -> "HeadParams":
        return self.map(np.copy)

    @classmethod
    def zeros(cls, d: int, d_h: int, h: int) -> "HeadParams":
        return cls(np.zeros((d_h, d)), np.zeros((d_h, d)), np.zeros(d_h),
                   np.zeros((h, 2 * d)), np.zeros(h), np.zeros((2, h)), np.zeros(2))

    @classmethod
    def init(cls, d: int, d_h: int, h: int, seed: int = 0) -> "HeadParams":
        rng = np.random.default_rng(seed)

        def dense(rows, cols):
            return rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols))

        return cls(dense(d_h, d), dense(d_h, d), rng.normal(0.0, 1.0 / np.sqrt(d_h), d_h),
                   dense(h, 2 * d), np.zeros(h), dense(2, h), np.zeros(2))


@dataclass
class ForwardOutput:
    attention: np.ndarray
    t_hat: tuple[float, float]


@dataclass
class LossBreakdown:
    reg: float
    guide: float
    total: float
    lam: float


@dataclass
class Sample:
    video: np.ndarray         # (P, D)
    query: np.ndarray         # (D,)
    gt: Moment                # frame span inside the video
    gt_norm: Optional[tuple[float, float]] = None  # defaults to gt / P

    def target(self) -> tuple[float, float]:
        if self.gt_norm is not None:
            return self.gt_norm
        p = self.video.shape[0]
        return (self.gt.start / p, self.gt.end / p)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(e, axis=-1):
    z = np.exp(e - e.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def huber(pred, target, delta: float = 1.0):
    if delta <= 0:
        raise ValueError("delta must be > 0")
    r = np.abs(np.asarray(pred, dtype=np.float64) - target)
    out = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def huber_grad(r, delta: float = 1.0):
    """d huber / d pred at residual r = pred - target."""
    return np.clip(r, -delta, delta)


def gt_mask(gt: Moment, p: int) -> np.ndarray:
    start, end = max(gt.start, 0), min(gt.end, p)
    if start >= end:
        raise DegenerateMask(f"ground truth [{gt.start}, {gt.end}) is empty within {p} frames")
    m = np.zeros(p)
    m[start:end] = 1.0 / (end - start)
    return m


def guide_loss(attention, gt: Moment, p: int) -> float:
    """KL(normalized ground-truth mask || attention), attention floored before the log."""
    m = gt_mask(gt, p)
    a = np.maximum(np.asarray(attention, dtype=np.float64), ATT_FLOOR)
    inside = m > 0
    return float(np.sum(m[inside] * (np.log(m[inside]) - np.log(a[inside]))))


def total_loss(fwd: ForwardOutput, gt_norm, gt_frames: Moment, lam: float = 1.0,
               delta: float = 1.0) -> LossBreakdown:
    ts, te = fwd.t_hat
    reg = 0.5 * (huber(ts, gt_norm[0], delta) + huber(te, gt_norm[1], delta))
    guide = guide_loss(fwd.attention, gt_frames, len(fwd.attention))
    return LossBreakdown(reg, guide, reg + lam * guide, lam)


def _check_dims(params: HeadParams, video, query):
    d = params.W_v.shape[1]
    if video.ndim != 2 or video.shape[1] != d or query.shape != (d,):
        raise DimMismatch(f"video {video.shape} / query {query.shape} vs head dim {d}")


def _forward_batch(params: HeadParams, F, Q):
    """Batched forward. F: (B, P, D), Q: (B, D). Returns intermediates."""
    U = np.einsum("bpd,hd->bph", F, params.W_v) + (Q @ params.W_t.T)[:, None, :]
    T = np.tanh(U)
    e = T @ params.v_att
    a = _softmax(e)
    pooled = np.einsum("bp,bpd->bd", a, F)
    z = np.concatenate([pooled, Q], axis=1)
    h = np.tanh(z @ params.W1.T + params.b1)
    o = h @ params.W2.T + params.b2
    c, w = _sigmoid(o[:, 0]), _sigmoid(o[:, 1])
    raw_s, raw_e = c - 0.5 * w, c + 0.5 * w
    ts = np.clip(raw_s, 0.0, 1.0 - EPS)
    lo = ts + EPS
    te = np.minimum(np.maximum(raw_e, lo), 1.0)
    return dict(T=T, a=a, z=z, h=h, c=c, w=w, raw_s=raw_s, raw_e=raw_e, ts=ts, te=te, lo=lo)


def forward(video, query_vec, params: HeadParams) -> ForwardOutput:
    video = np.asarray(video, dtype=np.float64)
    query_vec = np.asarray(query_vec, dtype=np.float64)
    _check_dims(params, video, query_vec)
    cache = _forward_batch(params, video[None], query_vec[None])
    return ForwardOutput(cache["a"][0], (float(cache["ts"][0]), float(cache["te"][0])))


def _loss_grad_batch(params, F, Q, M, G, lam, delta):
    """Summed loss terms and summed gradients over one equal-length batch."""
    c_ = _forward_batch(params, F, Q)
    a, T, h, z = c_["a"], c_["T"], c_["h"], c_["z"]
    d = F.shape[2]

    rs, re_ = c_["ts"] - G[:, 0], c_["te"] - G[:, 1]
    reg = 0.5 * (huber(rs, 0.0, delta) + huber(re_, 0.0, delta))
    a_fl = np.maximum(a, ATT_FLOOR)
    inside = M > 0
    kl_terms = np.where(inside, M * (np.log(np.where(inside, M, 1.0)) - np.log(a_fl)), 0.0)
    guide = kl_terms.sum(axis=1)

    # boundary clamps: zero gradient where a clamp is active
    d_ts = 0.5 * huber_grad(rs, delta)
    d_te = 0.5 * huber_grad(re_, delta)
    upper = c_["raw_e"] > 1.0
    lower = ~upper & (c_["raw_e"] < c_["lo"])
    d_ts = d_ts + np.where(lower, d_te, 0.0)
    d_raw_e = np.where(upper | lower, 0.0, d_te)
    s_active = (c_["raw_s"] > 0.0) & (c_["raw_s"] < 1.0 - EPS)
    d_raw_s = np.where(s_active, d_ts, 0.0)

    dc = d_raw_s + d_raw_e
    dw = 0.5 * (d_raw_e - d_raw_s)
    do = np.stack([dc * c_["c"] * (1 - c_["c"]), dw * c_["w"] * (1 - c_["w"])], axis=1)

    g = {}
    g["W2"] = do.T @ h
    g["b2"] = do.sum(axis=0)
    dh_pre = (do @ params.W2) * (1 - h * h)
    g["W1"] = dh_pre.T @ z
    g["b1"] = dh_pre.sum(axis=0)
    d_pooled = (dh_pre @ params.W1)[:, :d]

    da = np.einsum("bpd,bd->bp", F, d_pooled)
    da = da - lam * np.where(inside & (a > ATT_FLOOR), M / a_fl, 0.0)
    de = a * (da - (a * da).sum(axis=1, keepdims=True))

    g["v_att"] = np.einsum("bph,bp->h", T, de)
    dU = de[:, :, None] * params.v_att[None, None, :] * (1 - T * T)
    g["W_v"] = np.einsum("bph,bpd->hd", dU, F)
    g["W_t"] = dU.sum(axis=1).T @ Q
    return float(reg.sum()), float(guide.sum()), g


def _groups(batch: Sequence[Sample]):
    by_len: dict[int, list] = {}
    for s in batch:
        by_len.setdefault(s.video.shape[0], []).append(s)
    for p in sorted(by_len):
        items = by_len[p]
        F = np.stack([np.asarray(s.video, dtype=np.float64) for s in items])
        Q = np.stack([np.asarray(s.query, dtype=np.float64) for s in items])
        M = np.stack([gt_mask(s.gt, p) for s in items])
        G = np.array([s.target() for s in items], dtype=np.float64)
        yield F, Q, M, G


def loss_and_grad(params: HeadParams, batch: Sequence[Sample], lam: float = 1.0,
                  delta: float = 1.0) -> tuple[LossBreakdown, HeadParams]:
    """Mean loss over `batch` and its analytic gradient."""
    if not batch:
        raise ValueError("batch must be non-empty")
    for s in batch:
        _check_dims(params, np.asarray(s.video), np.asarray(s.query))
    reg = guide = 0.0
    total = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    for F, Q, M, G in _groups(batch):
        r, gd, g = _loss_grad_batch(params, F, Q, M, G, lam, delta)
        reg += r
        guide += gd
        for k in total:
            total[k] += g[k]
    n = len(batch)
    grads = HeadParams(**{k: v / n for k, v in total.items()})
    reg, guide = reg / n, guide / n
    return LossBreakdown(reg, guide, reg + lam * guide, lam), grads


def grad(params: HeadParams, batch: Sequence[Sample], lam: float = 1.0,
         delta: float = 1.0) -> HeadParams:
    return loss_and_grad(params, batch, lam, delta)[1]


def batch_loss(params: HeadParams, batch: Sequence[Sample], lam: float = 1.0,
               delta: float = 1.0) -> LossBreakdown:
    """Mean loss through the scalar forward path (independent of the batched code)."""
    reg = guide = 0.0
    for s in batch:
        out = total_loss(forward(s.video, s.query, params), s.target(), s.gt, lam, delta)
        reg += out.reg
        guide += out.guide
    n = len(batch)
    return LossBreakdown(reg / n, guide / n, reg / n + lam * guide / n, lam)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: HeadParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.arrays().items()},
                   {k: np.zeros_like(a) for k, a in params.arrays().items()}, 0)


def adam_step(params: HeadParams, grads: HeadParams, state: AdamState, lr: float = 4e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
              ) -> tuple[HeadParams, AdamState]:
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    g_all = grads.arrays()
    for k, p in params.arrays().items():
        g = g_all[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new_p[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[k], new_v[k] = m, v
    return HeadParams(**new_p), AdamState(new_m, new_v, t)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: Optional[int] = 8  # None = full batch
    lam: float = 1.0
    delta: float = 1.0
    d_h: int = 32
    hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0 or self.lam < 0 or self.delta <= 0:
            raise ValueError("lr and lambda must be >= 0, delta > 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    params: HeadParams
    trace: list = field(default_factory=list)  # LossBreakdown per epoch


def train(dataset: Sequence[Sample], config: TrainConfig = TrainConfig(),
          params: Optional[HeadParams] = None) -> TrainResult:
    """Minibatch Adam on the total loss.

    Each trace entry is the mean of the minibatch losses seen during that
    epoch. Shuffling is driven by `config.seed`, so runs are reproducible.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    d = np.asarray(dataset[0].video).shape[1]
    init_seq, shuffle_seq = np.random.SeedSequence(config.seed).spawn(2)
    if params is None:
        params = HeadParams.init(d, config.d_h, config.hidden,
                                 int(init_seq.generate_state(1)[0]))
    rng = np.random.default_rng(shuffle_seq)
    state = AdamState.zeros_like(params)
    n = len(dataset)
    bs = n if config.batch_size is None else min(config.batch_size, n)
    trace = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        reg = guide = 0.0
        for lo in range(0, n, bs):
            batch = [dataset[i] for i in order[lo:lo + bs]]
            loss, g = loss_and_grad(params, batch, config.lam, config.delta)
            reg += loss.reg * len(batch)
            guide += loss.guide * len(batch)
            params, state = adam_step(params, g, state, config.lr, config.beta1,
                                      config.beta2, config.eps)
        trace.append(LossBreakdown(reg / n, guide / n, reg / n + config.lam * guide / n,
                                   config.lam))
    return TrainResult(params, trace)


def predict(params: HeadParams, video, query_vec) -> tuple[float, float]:
    return forward(video, query_vec, params).t_hat


# -- checkpoints ----------------------------------------------------------
#
# Layout: 8-byte magic b"ATVGCKPT", u32 little-endian header length N,
# N bytes of UTF-8 JSON, then one ATVG matrix blob per parameter tensor.
# The header's "tensors" manifest gives each blob's name, shape, byte
# offset (relative to the end of the header) and byte length. Vectors are
# stored as 1 x n matrices; values are float32 on disk.

CKPT_MAGIC = b"ATVGCKPT"


def save_checkpoint(path, params: HeadParams, *, config: Optional[dict] = None,
                    seed: int = 0, epoch: int = 0) -> None:
    blobs, manifest, offset = [], [], 0
    for name, arr in params.arrays().items():
        blob = encode_matrix(np.atleast_2d(arr))
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset,
                         "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"dims": params.dims, "config": config or {}, "seed": seed,
                         "epoch": epoch, "tensors": manifest}, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC + struct.pack("<I", len(header)) + header)
            for blob in blobs:
                fh.write(blob)
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def load_checkpoint(path) -> tuple[HeadParams, dict]:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    if buf[:8] != CKPT_MAGIC or len(buf) < 12:
        raise FormatError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    base = 12 + hlen
    arrays = {}
    for t in header["tensors"]:
        blob = buf[base + t["offset"]: base + t["offset"] + t["length"]]
        arrays[t["name"]] = decode_matrix(blob).astype(np.float64).reshape(t["shape"])
    return HeadParams(**arrays), header
