"""Compare the numba and pure-numpy kernel backends.

Part 1 times each hot kernel on shapes taken from the default model and checks
that the two backends agree. Part 2 times a full training step in fresh
subprocesses with ``AAGNET_DISABLE_NUMBA`` set to 0 and 1.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from aagnet.kernels import _numba, _numpy

# (label, batch, H, W, Ci, Co, k, stride); shapes as they occur in the default net
CONV_CASES = [
    ("cnn stem 3x3 s2", 4, 129, 129, 3, 32, 3, 2),
    ("fire3x3 expand", 4, 34, 34, 16, 32, 3, 1),
    ("fire squeeze 1x1", 4, 32, 32, 64, 16, 1, 1),
    ("mbconv project 1x1", 4, 32, 32, 96, 32, 1, 1),
]
DW_CASES = [
    ("mbconv depthwise s2", 4, 65, 65, 48, 3, 2),
    ("mbconv depthwise s2 deep", 4, 17, 17, 192, 3, 2),
]
POOL_CASES = [
    ("maxpool after stem", 4, 64, 64, 32),
    ("maxpool mid", 4, 32, 32, 64),
]


def best_of(fn, repeat):
    fn()  # warm-up (and numba compile / cache load)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def compare(label, calls, repeat, rows):
    """calls: list of (kernel name, args)."""
    for name, args in calls:
        out_nb = getattr(_numba, name)(*args)
        out_np = getattr(_numpy, name)(*args)
        a = out_nb[0] if isinstance(out_nb, tuple) else out_nb
        b = out_np[0] if isinstance(out_np, tuple) else out_np
        err = float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))
        t_nb = best_of(lambda: getattr(_numba, name)(*args), repeat)
        t_np = best_of(lambda: getattr(_numpy, name)(*args), repeat)
        rows.append((label, name, t_np * 1e3, t_nb * 1e3, t_np / t_nb, err))


def kernel_table(repeat, quick):
    rng = np.random.default_rng(0)
    rows = []
    conv = CONV_CASES[:2] if quick else CONV_CASES
    for label, n, h, w, ci, co, k, s in conv:
        xp = rng.standard_normal((n, h, w, ci)).astype(np.float32)
        wt = rng.standard_normal((k, k, ci, co)).astype(np.float32)
        oh, ow = (h - k) // s + 1, (w - k) // s + 1
        dy = rng.standard_normal((n, oh, ow, co)).astype(np.float32)
        compare(label, [("conv2d_forward", (xp, wt, s, oh, ow)),
                        ("conv2d_backward_input", (dy, wt, s, xp.shape)),
                        ("conv2d_backward_weight", (xp, dy, s, k, k))], repeat, rows)
    for label, n, h, w, c, k, s in (DW_CASES[:1] if quick else DW_CASES):
        xp = rng.standard_normal((n, h, w, c)).astype(np.float32)
        wt = rng.standard_normal((k, k, c)).astype(np.float32)
        oh, ow = (h - k) // s + 1, (w - k) // s + 1
        dy = rng.standard_normal((n, oh, ow, c)).astype(np.float32)
        compare(label, [("depthwise_forward", (xp, wt, s, oh, ow)),
                        ("depthwise_backward_input", (dy, wt, s, xp.shape)),
                        ("depthwise_backward_weight", (xp, dy, s, k, k))], repeat, rows)
    for label, n, h, w, c in (POOL_CASES[:1] if quick else POOL_CASES):
        x = rng.standard_normal((n, h, w, c)).astype(np.float32)
        _, arg = _numpy.maxpool_forward(x, 2, 2)
        dy = rng.standard_normal((n, h // 2, w // 2, c)).astype(np.float32)
        compare(label, [("maxpool_forward", (x, 2, 2)),
                        ("maxpool_backward", (dy, arg, 2, 2, x.shape))], repeat, rows)
    return rows


STEP_SCRIPT = r"""
import json, sys, time
import numpy as np
from aagnet import kernels
from aagnet.model import ModelConfig, build_model
from aagnet.train import AdamState, train_step
scale, batch, steps = float(sys.argv[1]), int(sys.argv[2]), int(sys.argv[3])
cfg = ModelConfig.scaled(scale) if scale != 1.0 else ModelConfig()
m = build_model(cfg, seed=0)
rng = np.random.default_rng(0)
x = rng.random((batch, cfg.input_hw, cfg.input_hw, 3), dtype=np.float32)
y = rng.integers(0, cfg.num_classes, batch)
opt = AdamState(lr=1e-4)
train_step(m, x, y, opt, rng)  # warm-up
t0 = time.perf_counter()
for _ in range(steps):
    train_step(m, x, y, opt, rng)
print(json.dumps({"backend": kernels.BACKEND, "sec_per_step": (time.perf_counter() - t0) / steps}))
"""


def step_timing(scale, batch, steps):
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, AAGNET_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", STEP_SCRIPT, str(scale), str(batch), str(steps)],
                             env=env, capture_output=True, text=True, check=True)
        r = json.loads(res.stdout.strip().splitlines()[-1])
        out[r["backend"]] = r["sec_per_step"]
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="fewer cases, smaller train step")
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)

    rows = kernel_table(args.repeat, args.quick)
    print(f"{'case':<26}{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'rel err':>10}")
    for label, name, t_np, t_nb, sp, err in rows:
        print(f"{label:<26}{name:<26}{t_np:>10.2f}{t_nb:>10.2f}{sp:>8.1f}x{err:>10.1e}")

    scale, batch, steps = (0.25, 4, 2) if args.quick else (1.0, 20, 2)
    step = step_timing(scale, batch, steps)
    print(f"\ntrain step (scale {scale}, batch {batch}): "
          f"numpy {step['numpy']:.3f} s, numba {step['numba']:.3f} s, "
          f"speedup {step['numpy'] / step['numba']:.1f}x")

    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": [dict(zip(("case", "kernel", "numpy_ms", "numba_ms", "speedup", "rel_err"), r))
                                   for r in rows],
                       "train_step": {"scale": scale, "batch": batch, **step}}, fh, indent=2)


if __name__ == "__main__":
    main()
