"""Time the im2col/col2im kernels on the compiled and numpy backends.

    python3 benchmarks/bench_kernels.py --repeat 20
"""
import argparse
import timeit

import numpy as np

from hairsynth import kernels

SHAPES = [  # (N, C, H, W, k)
    (1, 3, 64, 64, 11),
    (1, 16, 64, 64, 3),
    (4, 32, 32, 32, 3),
    (1, 64, 8, 8, 3),
]


def bench(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    args = ap.parse_args(argv)
    if kernels.BACKEND != "compiled":
        print("compiled extension not built; only the python backend is timed")
    rng = np.random.default_rng(0)
    print(f"{'shape':<22}{'op':<8}{'python ms':>11}{'compiled ms':>13}{'speedup':>9}")
    for n, c, h, w, k in SHAPES:
        p = k // 2
        xp = rng.standard_normal((n, c, h + 2 * p, w + 2 * p)).astype(args.dtype)
        cols = kernels.im2col(xp, k, k, backend="python")
        label = f"{n}x{c}x{h}x{w} k{k}"
        for op, call in (
            ("im2col", lambda b: kernels.im2col(xp, k, k, backend=b)),
            ("col2im", lambda b: kernels.col2im(cols, xp.shape, k, k, backend=b)),
        ):
            t_py = bench(lambda: call("python"), args.repeat)
            if kernels.BACKEND == "compiled":
                t_c = bench(lambda: call("compiled"), args.repeat)
                print(f"{label:<22}{op:<8}{t_py:>11.3f}{t_c:>13.3f}{t_py / t_c:>8.1f}x")
            else:
                print(f"{label:<22}{op:<8}{t_py:>11.3f}{'-':>13}{'-':>9}")


if __name__ == "__main__":
    main()
