import os
import tempfile

import numpy as np

from tvgkit import grounding, tensorio
from tvgkit.momentgen import Moment

# Recall at tIoU thresholds counts strictly greater overlaps.
gt = grounding.Interval(0.0, 10.0)
preds = [grounding.Interval(0.0, e) for e in (10.0, 6.0, 4.5, 2.0)]
for p in preds:
    print(p, "tIoU", grounding.tiou(p, gt))
report = grounding.evaluate([(p, gt) for p in preds])
print(report.to_dict())

# exactly 0.5 is not recalled at 0.5
print(grounding.evaluate([(grounding.Interval(0, 5), gt)]).recall)

# frame spans convert to seconds linearly
meta = grounding.VideoMeta("v", duration_s=20.0, frame_count=10)
print(grounding.frames_to_interval(Moment(2, 5), meta))

# Feature matrices on disk, and PCA to shrink them
x = np.random.default_rng(0).normal(size=(50, 8)) * np.arange(8, 0, -1)
path = os.path.join(tempfile.mkdtemp(), "features.atvg")
tensorio.write_feature_matrix(x, path)
back = tensorio.read_feature_matrix(path)
print(back.dtype, back.shape)

model = tensorio.pca_fit(back, 3)
print("explained variance", np.round(model.explained_variance, 3))
y = tensorio.pca_transform(model, back)
err = np.sum((tensorio.pca_inverse(model, y) - back) ** 2)
print("reconstruction error %.3f" % err)

# uniform frame sampling used before clustering
print(tensorio.uniform_sample_indices(10, 5))
