"""
Command line driver: ``tvgkit {generate,ground,evaluate,train,pca}``.

Settings come from an optional JSON config file (``--config``) overridden by
flags. Exit codes: 0 success, 1 usage or config error, 2 empty result,
3 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import captionsel, grounding, tensorio, tvghead
from .embed import ProviderConfig, open_provider
from .errors import (ConfigError, DimMismatch, EmptyEvaluation, HttpFailure, IoFailure,
                     StoreUnreadable, TvgError, UnknownVideoId)
from .grounding import GeneratorConfig, Interval, VideoMeta
from .lexemes import load_lexicon, load_subtitles
from .momentgen import Moment, Strategy

log = logging.getLogger("tvgkit")

EXIT_OK, EXIT_CONFIG, EXIT_EMPTY, EXIT_IO = 0, 1, 2, 3


class CliExit(Exception):
    def __init__(self, code: int, message: str = ""):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    seed: int = 0
    sample_frames: int = 500
    k: int = 4
    index_weight: float = 1.0
    strategy: str = "random"
    n1: int = 5
    n2: int = 3
    caption_mode: str = "fixed"
    ref_len: Optional[float] = None
    all_candidates: bool = False
    stoplist: list = field(default_factory=list)
    lexicon: Optional[str] = None
    provider: dict = field(default_factory=dict)
    generator: str = "kmeans"
    window: int = 8
    stride: int = 4
    min_len: int = 1
    step: int = 1
    train_frames: int = 128
    lam: float = 1.0
    delta: float = 1.0
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    batch_size: Optional[int] = 8
    d_h: int = 32
    hidden: int = 32
    thresholds: list = field(default_factory=lambda: list(grounding.DEFAULT_THRESHOLDS))

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def validate(self) -> None:
        checks = [
            (self.sample_frames >= 1, "sample_frames must be >= 1"),
            (self.train_frames >= 1, "train_frames must be >= 1"),
            (self.k >= 1, "k must be >= 1"),
            (self.index_weight >= 0, "index_weight must be >= 0"),
            (self.n1 >= 0 and self.n2 >= 0, "n1 and n2 must be >= 0"),
            (self.caption_mode in ("fixed", "scaled", "random"), "bad caption_mode"),
            (self.generator in ("kmeans", "sliding", "brute"), "bad generator"),
            (min(self.window, self.stride, self.min_len, self.step) >= 1,
             "window, stride, min_len and step must be >= 1"),
            (self.lam >= 0 and self.delta > 0 and self.lr >= 0, "bad loss/optimizer values"),
            (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0, "bad Adam betas/eps"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size is None or self.batch_size >= 1, "batch_size must be >= 1"),
            (self.d_h >= 1 and self.hidden >= 1, "d_h and hidden must be >= 1"),
            (bool(self.thresholds) and all(0 < t < 1 for t in self.thresholds),
             "thresholds must lie in (0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            Strategy(self.strategy)
        except ValueError:
            raise ConfigError(f"unknown strategy {self.strategy!r}") from None
        if self.provider:
            self.provider_config()

    def provider_config(self) -> ProviderConfig:
        doc = dict(self.provider)
        url = os.environ.get("ATVG_EMBED_URL")
        if url:
            doc.update(mode="http", endpoint=url, path=None)
        if not doc:
            raise ConfigError("no embedding provider configured (--store or --embed-url)")
        try:
            return ProviderConfig(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad provider config: {exc}") from exc

    def cmg_config(self) -> captionsel.CmgConfig:
        return captionsel.CmgConfig(
            sample_frames=self.sample_frames, k=self.k, index_weight=self.index_weight,
            strategy=self.strategy, n1=self.n1, n2=self.n2, mode=self.caption_mode,
            ref_len=self.ref_len, all_candidates=self.all_candidates, seed=self.seed,
            stoplist=tuple(self.stoplist))

    def train_config(self) -> tvghead.TrainConfig:
        return tvghead.TrainConfig(
            epochs=self.epochs, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            batch_size=self.batch_size, lam=self.lam, delta=self.delta, d_h=self.d_h,
            hidden=self.hidden, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


# -- manifests ------------------------------------------------------------

@dataclass
class VideoRecord:
    video_id: str
    feature_path: Path
    meta: VideoMeta
    subtitle_path: Optional[Path] = None


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def read_jsonl(path) -> list:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    out = []
    for n, line in enumerate(lines, 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{n}: invalid JSON ({exc})") from exc
    return out


def dump_jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def load_manifest(path, need_subtitles: bool = False) -> list[VideoRecord]:
    """Read and eagerly validate a manifest.

    Accepts a JSON list or ``{"videos": [...]}``; each entry has video_id,
    feature_path, meta {duration_s, frame_count?} and optional subtitle_path.
    Relative paths resolve against the manifest's directory.
    """
    doc = _read_json(path)
    entries = doc.get("videos") if isinstance(doc, dict) else doc
    if not isinstance(entries, list):
        raise ConfigError(f"{path}: manifest must list videos")
    root = Path(path).parent
    out, seen = [], set()
    for i, e in enumerate(entries):
        try:
            vid = e["video_id"]
            fpath = root / e["feature_path"]
            meta = e.get("meta", e)
            duration = float(meta["duration_s"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: entry {i} is malformed ({exc})") from exc
        if vid in seen:
            raise ConfigError(f"{path}: duplicate video_id {vid!r}")
        seen.add(vid)
        if not fpath.is_file():
            raise ConfigError(f"{path}: feature file for {vid!r} not found: {fpath}")
        sub = e.get("subtitle_path")
        spath = root / sub if sub else None
        if need_subtitles and (spath is None or not spath.is_file()):
            raise ConfigError(f"{path}: subtitle file for {vid!r} not found: {spath}")
        count = meta.get("frame_count")
        if count is None:
            # header only; the payload is read when the video is processed
            with open(fpath, "rb") as fh:
                head = fh.read(tensorio.HEADER.size)
            if len(head) < tensorio.HEADER.size or head[:4] != tensorio.MAGIC:
                raise ConfigError(f"{path}: {fpath} is not an ATVG matrix")
            count = tensorio.HEADER.unpack(head)[2]
        try:
            out.append(VideoRecord(vid, fpath, VideoMeta(vid, duration, int(count)), spath))
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return out


def _load_frames(rec: VideoRecord) -> np.ndarray:
    frames = tensorio.read_feature_matrix(rec.feature_path)
    if frames.shape[0] != rec.meta.frame_count:
        raise DimMismatch(f"{rec.video_id}: {frames.shape[0]} rows but frame_count "
                          f"{rec.meta.frame_count}")
    return frames


def _write_text(path: Optional[str], text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def _pool_map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _report_failures(kind: str, failures: list, output: Optional[str]) -> None:
    for f in failures:
        log.warning("%s %s: %s", kind, f.get("video_id"), f.get("reason"))
    if output is not None and failures:
        _write_text(output + f".{kind}.jsonl", dump_jsonl(failures))


# -- subcommands ----------------------------------------------------------

def cmd_generate(args, cfg: RunConfig) -> int:
    videos = load_manifest(args.manifest, need_subtitles=True)
    lexicon = load_lexicon(cfg.lexicon) if cfg.lexicon else None
    cmg = cfg.cmg_config()
    provider = open_provider(cfg.provider_config())
    snapshot = cfg.to_dict()

    def work(rec: VideoRecord):
        try:
            words = load_subtitles(rec.subtitle_path, lexicon)
            frames = _load_frames(rec)
            moments = captionsel.run_cmg(frames, rec.meta, words, provider, cmg)
        except (TvgError, ValueError) as exc:
            return [], {"video_id": rec.video_id, "reason": f"{type(exc).__name__}: {exc}"}
        recs = []
        for cm in moments:
            r = cm.to_record()
            r["config"] = snapshot
            recs.append(r)
        return recs, None

    results = _pool_map(work, videos, args.jobs)
    records = [r for recs, _ in results for r in recs]
    skips = [s for _, s in results if s is not None]
    _write_text(args.output, dump_jsonl(records))
    _report_failures("skipped", skips, args.output)
    return EXIT_OK if records else EXIT_EMPTY


_TOKEN = re.compile(r"[\w']+")


def tokenize(query: str) -> list[str]:
    return _TOKEN.findall(query.lower())


def cmd_ground(args, cfg: RunConfig) -> int:
    videos = {v.video_id: v for v in load_manifest(args.manifest)}
    queries = read_jsonl(args.queries)
    provider = open_provider(cfg.provider_config())
    snapshot = cfg.to_dict()

    by_video: dict[str, list[int]] = {}
    failures = []
    for i, q in enumerate(queries):
        vid = q.get("video_id")
        if vid not in videos:
            failures.append({"video_id": vid, "query": q.get("query"),
                             "reason": f"UnknownVideoId: {vid!r}"})
            continue
        by_video.setdefault(vid, []).append(i)

    def work(vid):
        rec = videos[vid]
        out = {}
        try:
            frames = _load_frames(rec)
        except (TvgError, ValueError) as exc:
            return {i: exc for i in by_video[vid]}
        seed = int(captionsel.video_seed(cfg.seed, vid).generate_state(1)[0])
        gen = GeneratorConfig(cfg.generator, cfg.k, cfg.index_weight, seed, window=cfg.window,
                              stride=cfg.stride, min_len=cfg.min_len, step=cfg.step)
        for i in by_video[vid]:
            try:
                out[i] = grounding.ground_query(frames, rec.meta,
                                                tokenize(queries[i].get("query", "")),
                                                provider, gen)
            except (TvgError, ValueError) as exc:
                out[i] = exc
        return out

    merged = {}
    for part in _pool_map(work, list(by_video), args.jobs):
        merged.update(part)
    preds = []
    for i in sorted(merged):
        q, res = queries[i], merged[i]
        if isinstance(res, Exception):
            failures.append({"video_id": q["video_id"], "query": q.get("query"),
                             "reason": f"{type(res).__name__}: {res}"})
            continue
        interval, diag = res
        preds.append({"video_id": q["video_id"], "query": q.get("query"),
                      "t_start_s": interval.t_start, "t_end_s": interval.t_end,
                      "score": diag["score"], "candidates": diag["candidates"],
                      "config": snapshot})
    _write_text(args.output, dump_jsonl(preds))
    _report_failures("failed", failures, args.output)
    return EXIT_OK if preds else EXIT_EMPTY


def _keyed(records, path) -> dict:
    # (video_id, query, occurrence) so repeated queries pair up in file order
    out, seen = {}, {}
    for r in records:
        try:
            base = (r["video_id"], r["query"])
            iv = Interval(float(r["t_start_s"]), float(r["t_end_s"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: bad record {r!r} ({exc})") from exc
        n = seen.get(base, 0)
        seen[base] = n + 1
        out[base + (n,)] = iv
    return out


def cmd_evaluate(args, cfg: RunConfig) -> int:
    preds = _keyed(read_jsonl(args.predictions), args.predictions)
    gts = _keyed(read_jsonl(args.ground_truth), args.ground_truth)
    common = [k for k in gts if k in preds]
    try:
        report = grounding.evaluate([(preds[k], gts[k]) for k in common], cfg.thresholds)
    except EmptyEvaluation as exc:
        log.error("%s", exc)
        return EXIT_EMPTY
    doc = report.to_dict()
    doc["unmatched_predictions"] = sum(1 for k in preds if k not in gts)
    doc["unmatched_ground_truth"] = sum(1 for k in gts if k not in preds)
    doc["config"] = {"thresholds": cfg.thresholds}
    _write_text(args.output, json.dumps(doc, sort_keys=True) + "\n")
    return EXIT_OK


def _sampled_span(idx: np.ndarray, m: Moment) -> Moment:
    n = len(idx)
    s = min(int(np.searchsorted(idx, m.start)), n - 1)
    e = max(int(np.searchsorted(idx, m.end)), s + 1)
    return Moment(s, min(e, n))


def cmd_train(args, cfg: RunConfig) -> int:
    if args.output is None:
        raise ConfigError("train needs --output for the checkpoint")
    videos = {v.video_id: v for v in load_manifest(args.manifest)}
    labels = [captionsel.CaptionedMoment.from_record(r) for r in read_jsonl(args.labels)]
    provider = open_provider(cfg.provider_config())
    tcfg = cfg.train_config()

    cache: dict[str, tuple] = {}
    samples, skipped = [], []
    for lab in labels:
        rec = videos.get(lab.video_id)
        if rec is None:
            skipped.append({"video_id": lab.video_id, "reason": "UnknownVideoId"})
            continue
        try:
            if lab.video_id not in cache:
                frames = _load_frames(rec).astype(np.float64)
                idx = tensorio.uniform_sample_indices(frames.shape[0], cfg.train_frames)
                cache[lab.video_id] = (frames[idx], idx)
            sampled, idx = cache[lab.video_id]
            q, _ = grounding.query_vector(provider, lab.caption.split())
            p = rec.meta.frame_count
            if lab.moment.end > p:
                raise ValueError(f"label [{lab.moment.start}, {lab.moment.end}) beyond {p}")
            samples.append(tvghead.Sample(sampled, q, _sampled_span(idx, lab.moment),
                                          (lab.moment.start / p, lab.moment.end / p)))
        except (TvgError, ValueError) as exc:
            skipped.append({"video_id": lab.video_id, "reason": f"{type(exc).__name__}: {exc}"})
    _report_failures("skipped", skipped, args.output)
    if not samples:
        log.error("no usable training samples")
        return EXIT_EMPTY
    dims = {s.video.shape[1] for s in samples} | {s.query.shape[0] for s in samples}
    if len(dims) != 1:
        raise DimMismatch(f"frame and text feature dims differ: {sorted(dims)}")

    result = tvghead.train(samples, tcfg)
    tvghead.save_checkpoint(args.output, result.params, config=cfg.to_dict(), seed=cfg.seed,
                            epoch=tcfg.epochs)
    trace_path = args.trace or args.output + ".trace.csv"
    try:
        with open(trace_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "reg", "guide", "total"])
            for i, lb in enumerate(result.trace, 1):
                w.writerow([i, repr(lb.reg), repr(lb.guide), repr(lb.total)])
    except OSError as exc:
        raise IoFailure(f"{trace_path}: {exc}") from exc
    return EXIT_OK


def _reduced_path(path: Path, k: int) -> Path:
    return path.with_name(f"{path.stem}.pca{k}{path.suffix}")


def cmd_pca(args, cfg: RunConfig) -> int:
    videos = load_manifest(args.manifest)
    mats = [tensorio.read_feature_matrix(v.feature_path) for v in videos]
    if not mats:
        raise ConfigError("manifest lists no videos")
    if args.pca_mode == "fit":
        cols = {m.shape[1] for m in mats}
        if len(cols) != 1:
            raise DimMismatch(f"feature files disagree on dimension: {sorted(cols)}")
        d = cols.pop()
        if not 1 <= args.target_dim <= d:
            raise ConfigError(f"target dim {args.target_dim} must be in [1, {d}]")
        stacked = np.vstack(mats)
        if args.target_dim > stacked.shape[0]:
            raise ConfigError(f"target dim {args.target_dim} exceeds {stacked.shape[0]} rows")
        model = tensorio.pca_fit(stacked, args.target_dim)
        model.save(args.model)
        if not args.apply:
            return EXIT_OK
    else:
        model = tensorio.PcaModel.load(args.model)
    for v, m in zip(videos, mats):
        reduced = tensorio.pca_transform(model, m)  # DimMismatch propagates
        tensorio.write_feature_matrix(reduced, _reduced_path(v.feature_path, model.k))
    return EXIT_OK


# -- argument parsing -----------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliExit(EXIT_CONFIG, f"{self.prog}: error: {message}")


_OVERRIDES = {
    # flag dest -> RunConfig field
    "seed": "seed", "sample_frames": "sample_frames", "k": "k",
    "index_weight": "index_weight", "strategy": "strategy", "n1": "n1", "n2": "n2",
    "caption_mode": "caption_mode", "ref_len": "ref_len", "lexicon": "lexicon",
    "generator": "generator", "window": "window", "stride": "stride", "min_len": "min_len",
    "step": "step", "train_frames": "train_frames", "lam": "lam", "delta": "delta",
    "lr": "lr", "epochs": "epochs", "batch_size": "batch_size", "d_h": "d_h",
    "hidden": "hidden",
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    common.add_argument("--output", help="output path (default: stdout where sensible)")
    common.add_argument("--store", help="embedding store (ATVG matrix + .json sidecar)")
    common.add_argument("--embed-url", help="embedding service endpoint")
    common.add_argument("--missing-policy", choices=["skip", "error"])
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="tvgkit", description=__doc__.strip().splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="captioned pseudo labels")
    g.add_argument("--manifest", required=True)
    g.add_argument("--sample-frames", type=int)
    g.add_argument("--k", type=int)
    g.add_argument("--index-weight", type=float)
    g.add_argument("--strategy", choices=["random", "longest", "distinct"])
    g.add_argument("--n1", type=int)
    g.add_argument("--n2", type=int)
    g.add_argument("--caption-mode", choices=["fixed", "scaled", "random"])
    g.add_argument("--ref-len", type=float)
    g.add_argument("--all-candidates", action="store_true", default=None)
    g.add_argument("--lexicon", help="noun/verb lexicon for untagged subtitles")
    g.add_argument("--stoplist", help="file of tokens to ignore, one per line")

    r = sub.add_parser("ground", parents=[common], help="max-similarity grounding")
    r.add_argument("--manifest", required=True)
    r.add_argument("--queries", required=True)
    r.add_argument("--generator", choices=["kmeans", "sliding", "brute"])
    r.add_argument("--k", type=int)
    r.add_argument("--index-weight", type=float)
    r.add_argument("--window", type=int)
    r.add_argument("--stride", type=int)
    r.add_argument("--min-len", type=int)
    r.add_argument("--step", type=int)

    e = sub.add_parser("evaluate", parents=[common], help="R@tIoU and mIoU")
    e.add_argument("--predictions", required=True)
    e.add_argument("--ground-truth", required=True)
    e.add_argument("--thresholds", type=float, nargs="+")

    t = sub.add_parser("train", parents=[common], help="train the grounding head")
    t.add_argument("--labels", required=True)
    t.add_argument("--manifest", required=True)
    t.add_argument("--trace", help="loss trace CSV (default: OUTPUT.trace.csv)")
    t.add_argument("--train-frames", type=int)
    t.add_argument("--lam", type=float)
    t.add_argument("--delta", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--d-h", type=int)
    t.add_argument("--hidden", type=int)

    c = sub.add_parser("pca", parents=[common], help="fit or apply feature PCA")
    c.add_argument("pca_mode", choices=["fit", "apply"])
    c.add_argument("--manifest", required=True)
    c.add_argument("--model", required=True, help="PCA model file to write (fit) or read")
    c.add_argument("--target-dim", type=int, default=500)
    c.add_argument("--apply", action="store_true", help="fit: also write reduced features")
    return p


def resolve_config(args) -> RunConfig:
    doc = _read_json(args.config) if args.config else {}
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    cfg = RunConfig.from_dict(doc)
    for dest, name in _OVERRIDES.items():
        val = getattr(args, dest, None)
        if val is not None:
            setattr(cfg, name, val)
    if getattr(args, "all_candidates", None):
        cfg.all_candidates = True
    if getattr(args, "thresholds", None):
        cfg.thresholds = list(args.thresholds)
    if getattr(args, "stoplist", None):
        try:
            cfg.stoplist = Path(args.stoplist).read_text(encoding="utf-8").split()
        except OSError as exc:
            raise IoFailure(f"{args.stoplist}: {exc}") from exc
    if args.store and args.embed_url:
        raise ConfigError("use either --store or --embed-url, not both")
    if args.store:
        cfg.provider = {**cfg.provider, "mode": "file", "path": args.store, "endpoint": None}
    elif args.embed_url:
        cfg.provider = {**cfg.provider, "mode": "http", "endpoint": args.embed_url,
                        "path": None}
    if args.missing_policy:
        cfg.provider = {**cfg.provider, "missing_policy": args.missing_policy}
    cfg.validate()
    return cfg


COMMANDS = {"generate": cmd_generate, "ground": cmd_ground, "evaluate": cmd_evaluate,
            "train": cmd_train, "pca": cmd_pca}


def run(argv=None) -> int:
    """Parse `argv` and run a subcommand; returns the exit code."""
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except CliExit as exc:
        print(exc, file=sys.stderr)
        return exc.code
    except (IoFailure, StoreUnreadable, HttpFailure, OSError) as exc:
        print(f"tvgkit: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, DimMismatch, UnknownVideoId, ValueError) as exc:
        print(f"tvgkit: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TvgError as exc:
        print(f"tvgkit: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
