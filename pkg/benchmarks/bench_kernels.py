"""Time the convolution kernels: JIT backend vs pure-numpy fallback.

Runs the three conv ops (forward, input gradient, weight gradient) on the
layer shapes the default model actually produces, once per backend, and
prints per-op medians plus the speedup.  The first JIT call compiles, so
every op is warmed up before timing.

Usage:  python3 benchmarks/bench_kernels.py [--reps 20] [--batch 16]
"""
import argparse
import time

import numpy as np

from deskreid.kernels import _conv_numpy

try:
    from deskreid.kernels import _conv_numba
except ImportError:
    _conv_numba = None


def layer_shapes(batch, in_hw=(64, 32), channels=(16, 32, 64, 128)):
    """(x_shape, w_shape) per conv layer of the default backbone."""
    shapes = []
    c, (h, w) = 3, in_hw
    for ch in channels:
        shapes.append(((batch, c, h, w), (ch, c, 3, 3)))
        c, h, w = ch, (h + 1) // 2, (w + 1) // 2
    return shapes


def median_time(fn, reps):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_layer(impl, x, w, stride, pad, reps):
    rng = np.random.default_rng(0)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = impl.conv2d_forward(xp, w, stride)
    gy = rng.standard_normal(out.shape)
    hp, wp = xp.shape[2], xp.shape[3]
    kh, kw = w.shape[2], w.shape[3]
    ops = {
        "fwd": lambda: impl.conv2d_forward(xp, w, stride),
        "grad_in": lambda: impl.conv2d_backward_input(w, gy, stride, hp, wp),
        "grad_w": lambda: impl.conv2d_backward_weight(xp, gy, stride, kh, kw),
    }
    results = {}
    for name, fn in ops.items():
        fn()  # warmup: first numba call compiles
        results[name] = median_time(fn, reps)
    return results, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--batch", type=int, default=16)
    args = ap.parse_args()

    if _conv_numba is None:
        print("numba not importable; timing the numpy fallback only")

    rng = np.random.default_rng(7)
    header = f"{'layer':24s} {'op':8s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s} {'max|diff|':>10s}"
    print(header)
    print("-" * len(header))
    for x_shape, w_shape in layer_shapes(args.batch):
        x = rng.standard_normal(x_shape)
        w = rng.standard_normal(w_shape) / np.sqrt(np.prod(w_shape[1:]))
        label = "%dx%dx%dx%d -> %d" % (*x_shape, w_shape[0])
        np_res, np_out = bench_layer(_conv_numpy, x, w, stride=2, pad=1,
                                     reps=args.reps)
        if _conv_numba is None:
            for op, t in np_res.items():
                print(f"{label:24s} {op:8s} {t * 1e3:8.2f}ms")
            continue
        nb_res, nb_out = bench_layer(_conv_numba, x, w, stride=2, pad=1,
                                     reps=args.reps)
        diff = float(np.max(np.abs(np_out - nb_out)))
        for op in np_res:
            tn, tb = np_res[op], nb_res[op]
            d = f"{diff:10.1e}" if op == "fwd" else f"{'':>10s}"
            print(f"{label:24s} {op:8s} {tn * 1e3:8.2f}ms {tb * 1e3:8.2f}ms "
                  f"{tn / tb:7.1f}x {d}")


if __name__ == "__main__":
    main()
