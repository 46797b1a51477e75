"""Compare the compiled imaging kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--size 512] [--repeat 5]

Prints one line per kernel with the best-of-N wall time for each backend,
the speedup, and the largest absolute difference between the two outputs.
"""

import argparse
import sys
import timeit

import numpy as np

from cama import kernels


def cases(size, rng):
    plane = rng.random((size, size))
    mask = np.zeros((size, size))
    mask[0::2, 0::2] = 1.0
    band = rng.normal(0, 0.05, size=(size // 2, size // 2))
    kernel = rng.normal(size=(5, 5))
    return {
        "bilinear_fill": lambda m: m.bilinear_fill(plane * mask, mask),
        "correlate_replicate": lambda m: m.correlate_replicate(plane, kernel),
        "wiener_shrink": lambda m: m.wiener_shrink(band, 25 / 255**2, (3, 5, 7, 9)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    if "compiled" not in kernels.BACKENDS:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    py, core = kernels.BACKENDS["python"], kernels.BACKENDS["compiled"]
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}{'max |diff|':>14}")
    for name, fn in cases(args.size, rng).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat))
        t_c = min(timeit.repeat(lambda: fn(core), number=1, repeat=args.repeat))
        diff = float(np.abs(fn(py) - fn(core)).max())
        print(f"{name:<22}{1e3 * t_py:>12.2f}{1e3 * t_c:>14.2f}{t_py / t_c:>10.1f}{diff:>14.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
