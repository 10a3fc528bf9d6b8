"""Compare the numba kernels against the numpy fallbacks.

    python3 benchmarks/bench_kernels.py            # kernel timings
    python3 benchmarks/bench_kernels.py --epoch    # plus one tinycnn training epoch per path

Kernel timings call both implementations in-process.  The epoch timing runs a
subprocess per path with ``KCPRUNE_NUMBA`` set, which is how users switch.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from kcprune import _accel

EPOCH_SNIPPET = """
import time
from kcprune import _accel
from kcprune.datasets import synth_dataset
from kcprune.nncore import TrainConfig, init_state, tinycnn, train_epoch
g = tinycnn(); st = init_state(g, 0); ds = synth_dataset(0, 2000, 4, 16, 2.0)
cfg = TrainConfig(epochs=1, batch_size=64, lr=0.05)
train_epoch(g, st, ds.take(128), cfg, 0)  # compile / warm caches
t = time.perf_counter(); train_epoch(g, st, ds, cfg, 0); dt = time.perf_counter() - t
print(_accel.USING_NUMBA, dt)
"""


def cases(rng):
    # a ResNet-20 stage-1 conv on a batch of 64, and a tinycnn first layer
    for label, n, c, h, k, stride, pad in (("resnet 16x32x32 k3", 64, 16, 32, 3, 1, 1),
                                           ("tinycnn 1x16x16 k3", 64, 1, 16, 3, 1, 1),
                                           ("downsample 32x16x16 k3 s2", 64, 32, 16, 3, 2, 1)):
        x = rng.standard_normal((n, c, h, h)).astype(np.float32)
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (h + 2 * pad - k) // stride + 1
        cols = rng.standard_normal((c * k * k, n * ho * ho)).astype(np.float32)
        yield f"im2col {label}", lambda m, xp=xp, k=k, s=stride, o=ho: m.im2col(xp, k, s, o, o)
        yield f"col2im {label}", (lambda m, cols=cols, n=n, c=c, hp=xp.shape[2], k=k, s=stride, o=ho:
                                  m.col2im(cols, n, c, hp, hp, k, s, o, o))
    x = rng.standard_normal((64, 16, 32, 32)).astype(np.float32)
    out, arg = _accel.numpy_impl.maxpool_forward(x, 2, 2, 16, 16)
    yield "maxpool fwd 16x32x32", lambda m: m.maxpool_forward(x, 2, 2, 16, 16)
    yield "maxpool bwd 16x32x32", lambda m: m.maxpool_backward(out, arg, 32, 32, 2, 2)
    w = rng.standard_normal((64, 64, 9)).astype(np.float32)
    center = w.reshape(-1, 9).astype(np.float64).mean(axis=0)
    yield "kernel distances 64x64", lambda m: m.kernel_distances(w, center)
    yield "mean kernel 64x64", lambda m: m.mean_rows(w.reshape(-1, 9))


def best_of(fn, repeat):
    fn()
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--epoch", action="store_true", help="also time a full training epoch per path")
    args = ap.parse_args(argv)
    if _accel.numba_impl is None:
        sys.exit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<38}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, call in cases(rng):
        t_np = best_of(lambda: call(_accel.numpy_impl), args.repeat)
        t_nb = best_of(lambda: call(_accel.numba_impl), args.repeat)
        note = "  (numpy used on both paths)" if name.startswith("im2col") else ""
        print(f"{name:<38}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.2f}x{note}")

    if args.epoch:
        print()
        for flag in ("0", "1"):
            env = dict(os.environ, KCPRUNE_NUMBA=flag)
            out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True,
                                 text=True, check=True).stdout.split()
            print(f"tinycnn epoch (2000 samples), numba={out[0]:<5} {float(out[1]):.3f} s")


if __name__ == "__main__":
    main()
