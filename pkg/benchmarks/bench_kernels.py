"""Time the numba kernels against their numpy counterparts.

    python benchmarks/bench_kernels.py [--size N] [--repeat R]

Both paths are checked for identical output before timing. Without numba
the "numba" column times the pure-Python loop fallback, which is slow.
"""

import argparse
import timeit

import numpy as np

from masktune import _accel, kernels


def cases(n, rng):
    a = rng.normal(size=n)
    b = rng.normal(size=n)
    p = rng.uniform(size=n)
    bits = rng.integers(0, 2, n).astype(np.uint8)
    packed = kernels._pack_numpy(bits)
    key = 0x9E3779B97F4A7C15
    return [
        ("purity", lambda: kernels._purity_numpy(a, b), lambda: kernels._purity_numba(a, b)),
        ("uniform", lambda: kernels._uniform_numpy(key, 1000, n), lambda: kernels._uniform_numba(key, 1000, n)),
        ("gate", lambda: kernels._gate_numpy(p, key, 0), lambda: kernels._gate_numba(p, key, 0)),
        ("pack", lambda: kernels._pack_numpy(bits), lambda: kernels._pack_numba(bits)),
        ("unpack", lambda: kernels._unpack_numpy(packed, n), lambda: kernels._unpack_numba(packed, n)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    print(f"numba enabled: {_accel.NUMBA_ENABLED}   size: {args.size}   best of {args.repeat}")
    print(f"{'kernel':>8}  {'numpy ms':>10}  {'numba ms':>10}  {'speedup':>8}")
    for name, np_fn, nb_fn in cases(args.size, rng):
        if not np.array_equal(np_fn(), nb_fn()):  # also triggers compilation
            raise SystemExit(f"{name}: numpy and numba outputs differ")
        t_np = min(timeit.repeat(np_fn, number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(nb_fn, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:>8}  {t_np:10.3f}  {t_nb:10.3f}  {t_np / t_nb:8.2f}x")


if __name__ == "__main__":
    main()
