"""Check analytic gradients against central finite differences.

Probes a single convolution first, then random parameters of a whole
depth-2 network. ReLU and max-pool are only piecewise smooth, so any
probe where the step flips an activation pattern or pool winner is
thrown away and redrawn; comparing across a kink would tell us nothing.

    python3 demos/gradient_check.py
"""

import numpy as np

from densecount.nncore import conv2d_backward, conv2d_forward
from densecount.unet import UNetConfig, build_model, unet_backward, unet_forward

H = 1e-3
rng = np.random.default_rng(0)


def rel_err(analytic, fd):
    return abs(analytic - fd) / max(abs(fd), 1e-8)


# Single op: scalar projection f = sum(conv(x, w, b) * r) so every
# gradient entry is checkable one coordinate at a time.
x = rng.standard_normal((1, 2, 6, 6))
w = rng.standard_normal((3, 2, 3, 3))
b = rng.standard_normal(3)
r = rng.standard_normal((1, 3, 6, 6))
gx, gw, gb = conv2d_backward(r, x, w)

worst = 0.0
for _ in range(25):
    idx = tuple(int(rng.integers(s)) for s in w.shape)
    wp, wm = w.copy(), w.copy()
    wp[idx] += H
    wm[idx] -= H
    fd = (np.sum(conv2d_forward(x, wp, b) * r) - np.sum(conv2d_forward(x, wm, b) * r)) / (2 * H)
    worst = max(worst, rel_err(gw[idx], fd))
print(f"conv2d weight gradient, 25 probes: worst relative error {worst:.2e}")

# Whole net. The signature captures every pool winner and ReLU sign
# pattern; a probe is only kept when both sides of the step agree.
model = build_model(UNetConfig(depth=2, base_channels=4), seed=1)
for p in model.params:
    p.value = p.value.astype(np.float64)
xin = rng.uniform(0, 1, (1, 1, 16, 16))
r = rng.standard_normal((1, 1, 16, 16))


def projected():
    pred, cache = unet_forward(model, xin)
    sig = [m.tobytes() for m in cache["masks"]]
    blocks = list(cache["enc"]) + [cache["bottleneck"]] + [b for b, _ in cache["dec"]]
    for _, z1, _, z2 in blocks:
        sig.append((z1 > 0).tobytes())
        sig.append((z2 > 0).tobytes())
    return float(np.sum(pred * r)), sig


_, cache = unet_forward(model, xin)
model.zero_grads()
unet_backward(model, cache, r)
analytic = {p.name: p.grad.copy() for p in model.params}

kept, skipped, worst = 0, 0, 0.0
while kept < 20:
    p = model.params[int(rng.integers(len(model.params)))]
    idx = tuple(int(rng.integers(s)) for s in p.value.shape)
    orig = p.value[idx]
    p.value[idx] = orig + H
    fp, sp = projected()
    p.value[idx] = orig - H
    fm, sm = projected()
    p.value[idx] = orig
    if sp != sm:
        skipped += 1
        continue
    # grads are stored float32; lift to float64 so tiny errors stay visible
    worst = max(worst, rel_err(float(analytic[p.name][idx]), (fp - fm) / (2 * H)))
    kept += 1

print(f"whole depth-2 net, {kept} probes kept ({skipped} kink crossings redrawn): "
      f"worst relative error {worst:.2e}")
