import numpy as np

from tvgkit import embed, grounding, momentgen

# A toy video: 128 frames drifting along one direction, with frames 40..80
# pointing somewhere else. A query embedding equal to that second direction
# should land on the planted span.
rng = np.random.default_rng(0)
d = 32
seg_dir = rng.normal(size=d)
seg_dir /= np.linalg.norm(seg_dir)
bg = rng.normal(size=d)
bg -= (bg @ seg_dir) * seg_dir
bg /= np.linalg.norm(bg)

frames = np.tile(bg, (128, 1))
frames[40:80] = seg_dir
frames += rng.normal(0, 0.05, size=frames.shape)

# Appending the (scaled) frame index keeps k-means clusters contiguous in time
aug = momentgen.augment_with_index(frames, weight=1.0)
print(aug.shape)  # one extra column

cands = momentgen.kmeans_moments(frames, k=2, index_weight=1.0, seed=0)
print([(m.start, m.end) for m in cands])

best = momentgen.select(cands, "max_similarity", frames=frames, query_vec=seg_dir)
print("picked", best, "tIoU vs [40, 80):", best.iou(momentgen.Moment(40, 80)))

# Same thing end to end, with words looked up in an in-memory store
store = embed.EmbeddingStore(["dog", "running", "wall"], [seg_dir, seg_dir, bg])
provider = embed.FileProvider(embed.ProviderConfig(path="<memory>"), store)
meta = grounding.VideoMeta("toy", duration_s=32.0, frame_count=128)
interval, diag = grounding.ground_query(frames, meta, ["dog", "running", "unicorn"], provider,
                                        grounding.GeneratorConfig(k=2))
print(interval, "score %.3f" % diag["score"], "missing:", diag["missing_tokens"])

# Sliding windows and the full 2-D map are available as alternatives
for gen in (grounding.GeneratorConfig("sliding", window=40, stride=8),
            grounding.GeneratorConfig("brute", step=8)):
    iv, diag = grounding.ground_query(frames, meta, ["dog"], provider, gen)
    print(gen.method, len(diag["candidates"]), "candidates ->", iv)
