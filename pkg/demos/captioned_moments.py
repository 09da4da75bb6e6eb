import numpy as np

from tvgkit import captionsel, embed, grounding, lexemes

# Pseudo labels from a video and its subtitles. Nouns and verbs from the
# subtitle stream are ranked against the chosen moment's pooled feature.
rng = np.random.default_rng(1)
d = 24
vocab = ["meat", "juicy", "pork", "cup", "table", "phone", "cook", "cut", "slice", "walk"]
vecs = rng.normal(size=(len(vocab), d))
store = embed.EmbeddingStore(vocab, vecs)
provider = embed.FileProvider(embed.ProviderConfig(path="<memory>"), store)

# frames 30..70 look like a mix of the cooking words, the rest like the others
cooking = vecs[[0, 1, 2, 6, 7]].mean(axis=0)
other = vecs[[4, 5, 9]].mean(axis=0)
frames = np.tile(other, (100, 1))
frames[30:70] = cooking
frames += rng.normal(0, 0.05, size=frames.shape)

subs = lexemes.parse_subtitles([
    {"token": "Now", "pos": "other"},
    {"token": "cut", "pos": "verb"},
    {"token": "the", "pos": "other"},
    {"token": "juicy", "pos": "noun"},
    {"token": "pork", "pos": "noun"},
    {"token": "meat", "pos": "noun"},
    {"token": "cup", "pos": "noun"},
    {"token": "table", "pos": "noun"},
    {"token": "cook", "pos": "verb"},
    {"token": "slice", "pos": "verb"},
])
print(lexemes.extract_candidates(subs))

meta = grounding.VideoMeta("kitchen", duration_s=50.0, frame_count=100)
config = captionsel.CmgConfig(k=2, strategy="distinct", n1=3, n2=2)
(cm,) = captionsel.run_cmg(frames, meta, subs, provider, config)
print(cm.moment, "->", (cm.t_start_s, cm.t_end_s))
print("caption:", cm.caption)
for w in cm.tokens:
    print("   %-6s %-5s %.3f" % (w.token, w.pos.value, w.score))

# Scaled mode ties the caption length to the moment length
short = captionsel.select_topk([captionsel.ScoredWord(t, lexemes.Pos.NOUN, s)
                                for t, s in [("a", .9), ("b", .5), ("c", .4), ("d", .1)]],
                               [], n1=5, n2=0, mode="scaled", moment_len=64, ref_len=128)
print([w.token for w in short[0]])

# All candidates instead of one moment per video
for cm in captionsel.run_cmg(frames, meta, subs, provider,
                             captionsel.CmgConfig(k=3, all_candidates=True)):
    print(cm.moment, cm.caption)
