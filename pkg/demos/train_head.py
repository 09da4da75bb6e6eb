import os
import tempfile

import numpy as np

from tvgkit import grounding, tvghead
from tvgkit.momentgen import Moment

# A learnable head: attention over frames conditioned on the query, then a
# small MLP regressing (center, width). Targets here are easy: the span center
# is a linear function of the first query coordinate, and frames inside the
# span carry a bump on coordinate 1.
rng = np.random.default_rng(0)
P, D = 16, 8
data = []
for _ in range(200):
    u = rng.uniform(0.25, 0.75)
    s, e = u - 0.15, u + 0.15
    fs, fe = int(np.floor(s * P)), int(np.ceil(e * P))
    video = rng.normal(0, 0.1, size=(P, D))
    video[fs:fe, 1] += 2.0
    q = rng.normal(0, 0.3, size=D)
    q[0] = 2 * (u - 0.5)
    data.append(tvghead.Sample(video, q, Moment(fs, fe), (s, e)))

# zero parameters give uniform attention and the centered prediction
zero = tvghead.HeadParams.zeros(D, 4, 4)
print(tvghead.forward(data[0].video, data[0].query, zero).t_hat)

config = tvghead.TrainConfig(epochs=200, lr=4e-4, d_h=16, hidden=16, seed=0)
result = tvghead.train(data, config)
for epoch in (0, 49, 99, 199):
    lb = result.trace[epoch]
    print("epoch %3d  reg %.4f  guide %.4f  total %.4f" % (epoch + 1, lb.reg, lb.guide, lb.total))

ious = [grounding.tiou(grounding.Interval(*tvghead.predict(result.params, s.video, s.query)),
                       grounding.Interval(*s.gt_norm)) for s in data]
print("training mIoU %.3f" % np.mean(ious))

# where does the attention go for one sample?
s = data[3]
att = tvghead.forward(s.video, s.query, result.params).attention
print("gt frames", s.gt, "attention mass inside: %.2f" % att[s.gt.start:s.gt.end].sum())

ckpt = os.path.join(tempfile.mkdtemp(), "head.ckpt")
tvghead.save_checkpoint(ckpt, result.params, config={"lr": config.lr}, epoch=200)
params, header = tvghead.load_checkpoint(ckpt)
print(header["dims"], header["epoch"])
