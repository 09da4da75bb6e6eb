import csv
import hashlib
import json

import numpy as np
import pytest

from tvgkit.cli import RunConfig, load_manifest, run, tokenize
from tvgkit.errors import ConfigError
from tvgkit.tensorio import read_feature_matrix, write_feature_matrix
from tvgkit.tvghead import load_checkpoint

from synth import make_workspace


def lines(path):
    return [json.loads(x) for x in open(path, encoding="utf-8") if x.strip()]


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture
def ws(tmp_path):
    manifest, store = make_workspace(tmp_path)
    return tmp_path, manifest, store


def test_generate_three_videos(ws):
    root, manifest, store = ws
    out = root / "labels.jsonl"
    code = run(["generate", "--manifest", str(manifest), "--store", str(store),
                "--seed", "5", "--output", str(out), "--jobs", "1"])
    assert code == 0
    recs = lines(out)
    assert [r["video_id"] for r in recs] == ["vid0", "vid1", "vid2"]
    for r in recs:
        assert sorted(r) == ["caption", "config", "end_frame", "start_frame", "t_end_s",
                             "t_start_s", "tokens", "video_id"]
        assert r["config"]["seed"] == 5 and r["config"]["k"] == 4
        assert r["caption"].split() == [t["token"] for t in r["tokens"]]
        assert r["t_start_s"] == r["start_frame"] / 2


def test_generate_is_reproducible_across_jobs(ws):
    root, manifest, store = ws
    outs = []
    for i, jobs in enumerate(["1", "4", "1"]):
        out = root / f"run{i}.jsonl"
        assert run(["generate", "--manifest", str(manifest), "--store", str(store),
                    "--seed", "3", "--jobs", jobs, "--output", str(out)]) == 0
        outs.append(digest(out))
    assert len(set(outs)) == 1


def test_generate_missing_feature_is_config_error(ws):
    root, manifest, store = ws
    (root / "vid1.atvg").unlink()
    assert run(["generate", "--manifest", str(manifest), "--store", str(store),
                "--output", str(root / "x.jsonl")]) == 1
    assert not (root / "x.jsonl").exists()


def test_generate_skips_video_without_words(tmp_path):
    manifest, store = make_workspace(tmp_path, empty_subtitles={"vid1"})
    out = tmp_path / "labels.jsonl"
    assert run(["generate", "--manifest", str(manifest), "--store", str(store),
                "--output", str(out)]) == 0
    assert [r["video_id"] for r in lines(out)] == ["vid0", "vid2"]
    skips = lines(str(out) + ".skipped.jsonl")
    assert [s["video_id"] for s in skips] == ["vid1"]
    assert skips[0]["reason"].startswith("NoCandidateWords")


def test_generate_all_skipped_exits_2(tmp_path):
    manifest, store = make_workspace(tmp_path, n_videos=2, empty_subtitles={"vid0", "vid1"})
    assert run(["generate", "--manifest", str(manifest), "--store", str(store),
                "--output", str(tmp_path / "o.jsonl")]) == 2


def test_corrupt_feature_file_is_isolated(ws):
    root, manifest, store = ws
    (root / "vid0.atvg").write_bytes(b"ATVG" + b"\x01\x00\x00\x00" + b"\x40\x00\x00\x00" * 2)
    out = root / "labels.jsonl"
    assert run(["generate", "--manifest", str(manifest), "--store", str(store),
                "--output", str(out), "--seed", "1"]) == 0
    good = lines(out)
    assert [r["video_id"] for r in good] == ["vid1", "vid2"]
    # the surviving records match a clean run's records for the same videos
    clean_root = root / "clean"
    clean_root.mkdir()
    m2, s2 = make_workspace(clean_root)
    run(["generate", "--manifest", str(m2), "--store", str(s2), "--output",
         str(clean_root / "o.jsonl"), "--seed", "1"])
    clean = {r["video_id"]: r for r in lines(clean_root / "o.jsonl")}
    for r in good:
        assert {k: v for k, v in r.items() if k != "config"} == \
            {k: v for k, v in clean[r["video_id"]].items() if k != "config"}


def test_unknown_config_key_and_bad_values(ws, tmp_path):
    root, manifest, store = ws
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"kk": 3}))
    assert run(["generate", "--manifest", str(manifest), "--store", str(store),
                "--config", str(cfg)]) == 1
    assert run(["generate", "--manifest", str(manifest), "--store", str(store), "--k", "0"]) == 1
    assert run(["generate", "--manifest", str(manifest)]) == 1
    assert run(["nonsense"]) == 1


def test_config_file_and_flag_precedence(ws, tmp_path):
    root, manifest, store = ws
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"k": 2, "n1": 1, "seed": 9}))
    out = root / "o.jsonl"
    assert run(["generate", "--manifest", str(manifest), "--store", str(store),
                "--config", str(cfg), "--n1", "2", "--output", str(out)]) == 0
    conf = lines(out)[0]["config"]
    assert (conf["k"], conf["n1"], conf["seed"]) == (2, 2, 9)


def test_env_var_overrides_endpoint(monkeypatch):
    monkeypatch.setenv("ATVG_EMBED_URL", "http://127.0.0.1:1")
    pc = RunConfig(provider={"path": "store.atvg"}).provider_config()
    assert pc.mode == "http" and pc.endpoint == "http://127.0.0.1:1"


def test_manifest_validation(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps([{"video_id": "a", "feature_path": "a.atvg"}]))
    with pytest.raises(ConfigError):
        load_manifest(tmp_path / "m.json")
    write_feature_matrix(np.ones((5, 2)), tmp_path / "a.atvg")
    (tmp_path / "m.json").write_text(json.dumps(
        [{"video_id": "a", "feature_path": "a.atvg", "meta": {"duration_s": 2.5}}]))
    (rec,) = load_manifest(tmp_path / "m.json")
    assert rec.meta.frame_count == 5
    (tmp_path / "m.json").write_text(json.dumps(
        [{"video_id": "a", "feature_path": "a.atvg", "duration_s": 1},
         {"video_id": "a", "feature_path": "a.atvg", "duration_s": 1}]))
    with pytest.raises(ConfigError):
        load_manifest(tmp_path / "m.json")


def test_tokenize():
    assert tokenize("Cut the onion, then stir!") == ["cut", "the", "onion", "then", "stir"]


def ground_queries(root, rows):
    q = root / "queries.jsonl"
    q.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return q


def test_ground_planted_and_failures(ws):
    root, manifest, store = ws
    # vid0's span [16, 32) carries the embedding of "pan"
    q = ground_queries(root, [
        {"video_id": "vid0", "query": "the pan", "t_start_s": 8.0, "t_end_s": 16.0},
        {"video_id": "nope", "query": "pan"},
        {"video_id": "vid1", "query": "zzz qqq"},
    ])
    out = root / "pred.jsonl"
    assert run(["ground", "--manifest", str(manifest), "--store", str(store), "--queries",
                str(q), "--output", str(out), "--k", "3"]) == 0
    (pred,) = lines(out)
    assert (pred["t_start_s"], pred["t_end_s"]) == (8.0, 16.0)
    assert pred["score"] == max(c["score"] for c in pred["candidates"])
    fails = lines(str(out) + ".failed.jsonl")
    reasons = sorted(f["reason"].split(":")[0] for f in fails)
    assert reasons == ["NoResolvableTokens", "UnknownVideoId"]


def test_ground_single_candidate(ws):
    root, manifest, store = ws
    q = ground_queries(root, [{"video_id": "vid2", "query": "stir"}])
    out = root / "pred.jsonl"
    assert run(["ground", "--manifest", str(manifest), "--store", str(store), "--queries",
                str(q), "--output", str(out), "--generator", "sliding", "--window", "999"]) == 0
    (pred,) = lines(out)
    assert (pred["t_start_s"], pred["t_end_s"]) == (0.0, 32.0)


def test_ground_all_fail_exits_2(ws):
    root, manifest, store = ws
    q = ground_queries(root, [{"video_id": "vid0", "query": "zzz"}])
    assert run(["ground", "--manifest", str(manifest), "--store", str(store), "--queries",
                str(q), "--output", str(root / "p.jsonl")]) == 2


def write_rows(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def test_evaluate_crafted_pairs(tmp_path):
    gt = [{"video_id": f"v{i}", "query": "q", "t_start_s": 0.0, "t_end_s": 10.0}
          for i in range(4)]
    # tIoU 1.0, 0.6, 0.45, 0.2 against [0, 10]
    pred = [dict(g, t_end_s=e) for g, e in zip(gt, [10.0, 6.0, 4.5, 2.0])]
    out = tmp_path / "report.json"
    assert run(["evaluate", "--predictions", str(write_rows(tmp_path / "p.jsonl", pred)),
                "--ground-truth", str(write_rows(tmp_path / "g.jsonl", gt)),
                "--output", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["recall"] == {"0.3": 0.75, "0.5": 0.5, "0.7": 0.25}
    assert abs(rep["miou"] - 0.5625) < 1e-12
    assert rep["n"] == 4 and rep["unmatched_predictions"] == 0


def test_evaluate_self_and_disjoint(tmp_path):
    gt = write_rows(tmp_path / "g.jsonl", [{"video_id": "a", "query": "q", "t_start_s": 1,
                                            "t_end_s": 2}])
    out = tmp_path / "r.json"
    assert run(["evaluate", "--predictions", str(gt), "--ground-truth", str(gt),
                "--output", str(out)]) == 0
    assert json.loads(out.read_text())["miou"] == 1.0
    other = write_rows(tmp_path / "o.jsonl", [{"video_id": "b", "query": "q", "t_start_s": 1,
                                               "t_end_s": 2}])
    assert run(["evaluate", "--predictions", str(other), "--ground-truth", str(gt)]) == 2


def test_evaluate_missing_file_is_io_error(tmp_path):
    assert run(["evaluate", "--predictions", str(tmp_path / "nope"), "--ground-truth",
                str(tmp_path / "nope2")]) == 3


def test_train_writes_checkpoint_and_trace(ws):
    root, manifest, store = ws
    labels = root / "labels.jsonl"
    assert run(["generate", "--manifest", str(manifest), "--store", str(store),
                "--output", str(labels)]) == 0
    ckpt = root / "head.ckpt"
    args = ["train", "--labels", str(labels), "--manifest", str(manifest), "--store",
            str(store), "--output", str(ckpt), "--epochs", "5", "--d-h", "4", "--hidden", "4",
            "--train-frames", "32"]
    assert run(args) == 0
    params, header = load_checkpoint(ckpt)
    assert header["dims"] == {"D": 16, "D_h": 4, "H": 4}
    assert header["config"]["epochs"] == 5
    rows = list(csv.reader(open(str(ckpt) + ".trace.csv")))
    assert rows[0] == ["epoch", "reg", "guide", "total"] and len(rows) == 6
    first = digest(ckpt)
    assert run(args) == 0
    assert digest(ckpt) == first


def test_train_requires_output(ws):
    root, manifest, store = ws
    assert run(["train", "--labels", str(root / "x"), "--manifest", str(manifest),
                "--store", str(store)]) == 1


def pca_workspace(tmp_path, cols=(8, 8)):
    rng = np.random.default_rng(0)
    entries = []
    for i, c in enumerate(cols):
        write_feature_matrix(rng.normal(size=(10, c)), tmp_path / f"f{i}.atvg")
        entries.append({"video_id": f"f{i}", "feature_path": f"f{i}.atvg", "duration_s": 5})
    (tmp_path / "m.json").write_text(json.dumps(entries))
    return tmp_path / "m.json"


def test_pca_fit_and_apply(tmp_path):
    m = pca_workspace(tmp_path)
    model = tmp_path / "pca.npz"
    assert run(["pca", "fit", "--manifest", str(m), "--model", str(model), "--target-dim", "3",
                "--apply"]) == 0
    assert model.is_file()
    for i in range(2):
        assert read_feature_matrix(tmp_path / f"f{i}.pca3.atvg").shape == (10, 3)
    assert read_feature_matrix(tmp_path / "f0.atvg").shape == (10, 8)


def test_pca_bad_target_and_dim_mismatch(tmp_path):
    m = pca_workspace(tmp_path)
    model = tmp_path / "pca.npz"
    assert run(["pca", "fit", "--manifest", str(m), "--model", str(model),
                "--target-dim", "9"]) == 1
    assert run(["pca", "fit", "--manifest", str(m), "--model", str(model),
                "--target-dim", "3"]) == 0
    other = tmp_path / "other"
    other.mkdir()
    m2 = pca_workspace(other, cols=(6,))
    assert run(["pca", "apply", "--manifest", str(m2), "--model", str(model)]) == 1
    mixed = tmp_path / "mixed"
    mixed.mkdir()
    assert run(["pca", "fit", "--manifest", str(pca_workspace(mixed, cols=(8, 6))), "--model",
                str(model), "--target-dim", "3"]) == 1
