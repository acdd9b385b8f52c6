import time
import numpy as np
from flowgrad import *
from flowgrad.flows import Tape
from flowgrad.recursion import RECURSION_TIMER

rng = np.random.default_rng(0)

def rec_time(m, xx, reps=25):
    def f():
        t = Tape(m.params)
        forward_with_G(m, xx, t)
    f(); f()
    vals = []
    for _ in range(reps):
        RECURSION_TIMER.reset()
        f()
        vals.append(RECURSION_TIMER.seconds)
    return np.median(vals)

for w, batch in ((256, 256), (512, 256)):
    times = []
    for d in (8, 16, 32, 64):
        b = standard_normal(d)
        m = build_flow(b, n_layers=4, kind="affine", hidden=(w,), rng=rng)
        xx = b.sample(rng, batch)
        times.append(rec_time(m, xx))
    ratios = [times[i+1]/times[i] for i in range(3)]
    print(f"w={w} batch={batch}: rec(ms)", [f"{t*1e3:.2f}" for t in times],
          "ratios", [f"{r:.3f}" for r in ratios])
