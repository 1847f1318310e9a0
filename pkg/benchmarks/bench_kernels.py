"""Compare the numba and numpy kernel backends.

Times each hot kernel on shapes seen during training, then a full training
step in a fresh interpreter per ``HSEG_BACKEND`` value.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--no-step]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from hseg import kernels

STEP_SNIPPET = """
import time, numpy as np
from hseg import losses as L, models as M, training as TR
from hseg.phantom import PhantomConfig, generate_arrays
img, lab = generate_arrays(PhantomConfig(n_volumes=1, slices_per_volume=4, test_volumes=0, seed=0))[0]
batch = (img[:, None, :32, :32].copy(), lab[:, :32, :32].copy())
model = M.build_model("hunet", depth=3, base_channels=8, seed=0)
cfg = TR.TrainConfig(patch_size=32, loss=L.LossConfig(class_weights=(1, 1, 1, 1)))
opt = TR.Adam(model.params)
TR.train_step(model, batch, opt, cfg)  # compile / warm up
t = time.perf_counter()
for _ in range({n}):
    TR.train_step(model, batch, opt, cfg)
print((time.perf_counter() - t) / {n})
"""


def cases(rng):
    x = rng.standard_normal((4, 16, 34, 34)).astype(np.float32)  # padded 32x32
    w = rng.standard_normal((16, 16, 3, 3)).astype(np.float32)
    b = np.zeros(16, np.float32)
    dout = rng.standard_normal((4, 16, 32, 32)).astype(np.float32)
    pool_in = rng.standard_normal((4, 16, 32, 32)).astype(np.float32)
    pts_a = rng.integers(0, 64, (400, 2)).astype(np.float64)
    pts_b = rng.integers(0, 64, (500, 2)).astype(np.float64)

    def pool_back(impl):
        _, idx = impl["maxpool2_forward"](pool_in)
        d = rng.standard_normal((4, 16, 16, 16)).astype(np.float32)
        return lambda: impl["maxpool2_backward"](d, idx)

    return {
        "conv2d_forward 4x16x32x32": lambda impl: (lambda: impl["conv2d_forward"](x, w, b, 1)),
        "conv2d_backward 4x16x32x32": lambda impl: (lambda: impl["conv2d_backward"](x, w, dout, 1)),
        "maxpool2_forward 4x16x32x32": lambda impl: (lambda: impl["maxpool2_forward"](pool_in)),
        "maxpool2_backward 4x16x16x16": pool_back,
        "min_sq_dists 400x500": lambda impl: (lambda: impl["min_sq_dists"](pts_a, pts_b)),
    }


def bench_kernels(repeat):
    backends = [name for name in ("numba", "numpy") if name in kernels.IMPLEMENTATIONS]
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s}" + "".join(f"{b + ' ms':>12s}" for b in backends))
    for label, make in cases(rng).items():
        cells = []
        for name in backends:
            fn = make(kernels.IMPLEMENTATIONS[name])
            fn()  # numba compiles on first call
            best = min(timeit.repeat(fn, number=1, repeat=repeat))
            cells.append(f"{best * 1e3:12.3f}")
        print(f"{label:32s}" + "".join(cells))


def bench_step(n):
    print("\nfull HU-Net training step (batch 4, 32x32, depth 3, base 8)")
    for backend in ("numba", "numpy"):
        if backend == "numba" and not kernels.HAVE_NUMBA:
            continue
        env = dict(os.environ, HSEG_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=n)], env=env,
                             capture_output=True, text=True, check=True)
        print(f"  {backend:6s} {float(out.stdout) * 1e3:9.1f} ms/step")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20, help="timing repeats per kernel (best is kept)")
    parser.add_argument("--steps", type=int, default=10, help="training steps timed per backend")
    parser.add_argument("--no-step", action="store_true", help="skip the end-to-end step timing")
    args = parser.parse_args()
    print(f"active backend at import: {kernels.BACKEND}")
    bench_kernels(args.repeat)
    if not args.no_step:
        bench_step(args.steps)


if __name__ == "__main__":
    main()
