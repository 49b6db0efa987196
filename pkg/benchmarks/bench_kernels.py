"""Time the numba kernels against their pure-numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 50]

The numba column is blank when numba is missing or MHIM_DISABLE_NUMBA is set.
The first numba call compiles; it is made before timing.
"""

import argparse
import timeit

import numpy as np

from mhim.numerics import kernels


def _cases(rng):
    for rows, cols in ((1, 384), (16, 384), (384, 384)):
        x = rng.normal(size=(rows, cols))
        y = kernels.np_softmax_rows(x, 0.5)
        g = rng.normal(size=(rows, cols))
        yield f"softmax {rows}x{cols}", lambda f: f(x, 0.5), "softmax_rows"
        yield f"softmax_bwd {rows}x{cols}", lambda f: f(y, g, 0.5), "softmax_rows_backward"
    for shape in ((64, 64), (512, 512)):
        p, grad = rng.normal(size=shape), rng.normal(size=shape)
        m, v = np.zeros(shape), np.zeros(shape)
        yield (f"adam {shape[0]}x{shape[1]}",
               lambda f: f(p, grad, m, v, 1e-4, 0.9, 0.999, 1e-8, 1e-5, 3), "adam_update")
        t, s = rng.normal(size=shape), rng.normal(size=shape)
        yield f"ema {shape[0]}x{shape[1]}", lambda f: f(t, s, 0.9999), "ema_update"
    for n in (40, 200, 2000):
        scores = np.round(rng.normal(size=n), 2)
        labels = rng.integers(0, 2, size=n)
        yield f"mann_whitney n={n}", lambda f: f(scores, labels), "mann_whitney_u"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"numba available: {kernels.HAVE_NUMBA}")
    print(f"{'kernel':28s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for label, call, name in _cases(rng):
        np_fn = getattr(kernels, "np_" + name)
        t_np = min(timeit.repeat(lambda: call(np_fn), number=1, repeat=args.repeat)) * 1e6
        if kernels.HAVE_NUMBA:
            nb_fn = getattr(kernels, "nb_" + name)
            call(nb_fn)
            t_nb = min(timeit.repeat(lambda: call(nb_fn), number=1, repeat=args.repeat)) * 1e6
            print(f"{label:28s} {t_np:10.1f} {t_nb:10.1f} {t_np / t_nb:7.2f}x")
        else:
            print(f"{label:28s} {t_np:10.1f} {'':>10s} {'':>8s}")


if __name__ == "__main__":
    main()
