import numpy as np
import pytest
from hypothesis import given, strategies as st

from tvgkit.captionsel import (CaptionedMoment, CmgConfig, ScoredWord, assemble_caption,
                               run_cmg, score_words, select_topk)
from tvgkit.errors import ConfigError, DimMismatch, EmptyCaption, NoCandidateWords
from tvgkit.grounding import Interval, VideoMeta, tiou
from tvgkit.lexemes import Pos, SubtitleWord
from tvgkit.momentgen import Moment

from synth import memory_provider, planted_vocab, unit, words_from


def sw(token, score, pos=Pos.NOUN):
    return ScoredWord(token, pos, score)


def test_score_words_examples():
    e = np.eye(3)
    scores = score_words(e[0], ["meat", "cup"], e[:2])
    assert [s.score for s in scores] == [1.0, 0.0]
    assert [s.token for s in scores] == ["meat", "cup"]
    assert score_words(e[0], [], np.zeros((0, 3))) == []


def test_score_words_dim_mismatch():
    with pytest.raises(DimMismatch):
        score_words(np.ones(3), ["a", "b"], np.ones((1, 3)))
    with pytest.raises(DimMismatch):
        score_words(np.ones(3), ["a"], np.ones((1, 4)))


def test_topk_fixed():
    nouns = [sw("c", 0.7), sw("a", 0.9), sw("d", 0.6), sw("b", 0.8)]
    verbs = [sw("cut", 0.1, Pos.VERB), sw("cook", 0.3, Pos.VERB)]
    n, v = select_topk(nouns, verbs, 3, 3)
    assert [w.token for w in n] == ["a", "b", "c"]
    assert [w.token for w in v] == ["cook", "cut"]


def test_topk_ties_prefer_earlier():
    n, _ = select_topk([sw("x", 0.5), sw("y", 0.5), sw("z", 0.5)], [], 2, 0)
    assert [w.token for w in n] == ["x", "y"]


def test_topk_scaled():
    nouns = [sw(f"n{i}", 1 - i / 10) for i in range(6)]
    n, v = select_topk(nouns, [], 5, 3, "scaled", moment_len=64, ref_len=128)
    assert len(n) == 3 and v == []
    n, _ = select_topk(nouns, [], 5, 0, "scaled", moment_len=1, ref_len=128)
    assert len(n) == 1
    n, _ = select_topk(nouns, [], 5, 0, "scaled", moment_len=512, ref_len=128)
    assert len(n) == 6


def test_topk_random_is_seeded():
    nouns = [sw(f"n{i}", i / 10) for i in range(8)]
    a = select_topk(nouns, [], 3, 0, "random", seed=4)
    b = select_topk(nouns, [], 3, 0, "random", seed=4)
    assert a == b and len(a[0]) == 3
    assert len({w.token for w in a[0]}) == 3


def test_assemble_caption():
    assert assemble_caption([sw("meat", .9), sw("cup", .5)], [sw("cook", .4, Pos.VERB)]) == \
        "meat cup cook"
    assert assemble_caption([], [sw("cut", .2, Pos.VERB)]) == "cut"
    with pytest.raises(EmptyCaption):
        assemble_caption([], [])


scores = st.lists(st.floats(-1, 1), min_size=0, max_size=12)


@given(scores, st.integers(0, 12))
def test_fixed_selection_dominates(vals, n1):
    nouns = [sw(f"w{i}", s) for i, s in enumerate(vals)]
    chosen, _ = select_topk(nouns, [], n1, 0)
    assert len(chosen) == min(n1, len(nouns))
    rest = [w for w in nouns if w not in chosen]
    assert all(c.score >= r.score for c in chosen for r in rest)
    assert [w.score for w in chosen] == sorted((w.score for w in chosen), reverse=True)
    bigger, _ = select_topk(nouns, [], n1 + 1, 0)
    assert set(chosen) <= set(bigger)


@given(scores)
def test_caption_roundtrips_tokens(vals):
    nouns = [sw(f"w{i}", s) for i, s in enumerate(vals)]
    n, v = select_topk(nouns, [sw("go", 0.0, Pos.VERB)], 5, 3)
    assert assemble_caption(n, v).split(" ") == [w.token for w in n + v]


def test_cmg_config_rejects_annotation_strategies():
    with pytest.raises(ConfigError):
        CmgConfig(strategy="max_similarity")
    with pytest.raises(ConfigError):
        CmgConfig(mode="weird")


def planted_setup(seed=0, p=128, d=32, seg=(40, 80)):
    rng = np.random.default_rng(seed)
    target = unit(rng.normal(size=d))
    nouns, verbs, dn, dv, tokens, vecs = planted_vocab(rng, d, target)
    bg = rng.normal(size=d)
    frames = bg + rng.normal(0, 0.3, size=(p, d))
    frames -= np.outer(frames @ target, target)  # background orthogonal to target
    frames[seg[0]:seg[1]] = target + rng.normal(0, 0.02, size=(seg[1] - seg[0], d))
    words = words_from(nouns + dn, verbs + dv, rng)
    meta = VideoMeta("vid", float(p) / 4, p)
    return frames, meta, words, memory_provider(tokens, vecs), nouns, verbs


def test_run_cmg_planted_segment():
    frames, meta, words, prov, nouns, verbs = planted_setup()
    cfg = CmgConfig(k=2, strategy="distinct")
    (cm,) = run_cmg(frames, meta, words, prov, cfg)
    got = Interval(cm.t_start_s, cm.t_end_s)
    assert tiou(got, Interval(10.0, 20.0)) >= 0.9
    assert {w.token for w in cm.tokens if w.pos is Pos.NOUN} == set(nouns)
    assert {w.token for w in cm.tokens if w.pos is Pos.VERB} == set(verbs)
    assert cm.caption.split() == [w.token for w in cm.tokens]
    assert cm.meta["k"] == 2


def test_run_cmg_deterministic_and_record_roundtrip():
    frames, meta, words, prov, *_ = planted_setup(seed=3)
    cfg = CmgConfig(k=4, seed=7)
    a = run_cmg(frames, meta, words, prov, cfg)
    b = run_cmg(frames, meta, words, prov, cfg)
    assert [x.to_record() for x in a] == [y.to_record() for y in b]
    back = CaptionedMoment.from_record(a[0].to_record())
    assert back.to_record() == a[0].to_record()


def test_run_cmg_all_candidates_cover_video():
    frames, meta, words, prov, *_ = planted_setup(seed=1)
    out = run_cmg(frames, meta, words, prov, CmgConfig(k=3, all_candidates=True))
    assert out[0].moment.start == 0 and out[-1].moment.end == 128
    for a, b in zip(out, out[1:]):
        assert a.moment.end == b.moment.start


def test_run_cmg_maps_sampled_indices_back():
    frames, meta, words, prov, *_ = planted_setup(seed=2, p=200, seg=(60, 130))
    out = run_cmg(frames, meta, words, prov, CmgConfig(k=2, sample_frames=50, all_candidates=True))
    assert out[-1].moment.end == 200
    # sampled rows sit every 4 frames
    assert all(cm.moment.start % 4 == 0 for cm in out)
    assert any(cm.moment == Moment(60, 132) for cm in out)


def test_run_cmg_no_candidates():
    frames, meta, _, prov, *_ = planted_setup()
    with pytest.raises(NoCandidateWords):
        run_cmg(frames, meta, [SubtitleWord("the", Pos.OTHER)], prov)
    with pytest.raises(NoCandidateWords):
        run_cmg(frames, meta, [SubtitleWord("unknownword", Pos.NOUN)], prov)


def test_run_cmg_frame_count_mismatch():
    frames, _, words, prov, *_ = planted_setup()
    with pytest.raises(DimMismatch):
        run_cmg(frames, VideoMeta("vid", 10.0, 100), words, prov)
