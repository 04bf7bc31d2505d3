"""Time the numba kernels against their pure-numpy twins.

Runs every kernel in ``nnocp.kernels.IMPLEMENTATIONS`` on representative
problem sizes, checks that both paths agree, and prints a speedup table.
``NNOCP_NO_NUMBA=1`` only changes which path the package binds by default;
this script always times both when numba is importable.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--pixels N]
"""

import argparse
import time

import numpy as np

from nnocp import kernels
from nnocp.bloch import SequenceSpec, build_dictionary, dictionary_grid


def best_of(fn, args, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def max_gap(a, b):
    if isinstance(a, tuple):
        return max(max_gap(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timing repetitions per kernel (best is kept)")
    parser.add_argument("--pixels", type=int, default=128,
                        help="image side length for the batched kernels")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    spec = SequenceSpec()
    npix = args.pixels * args.pixels

    field = rng.normal(size=(513, 513))
    t1 = rng.uniform(100.0, 5000.0, npix)
    t2 = rng.uniform(10.0, 1800.0, npix)

    t1g, t2g = dictionary_grid("medium")
    dictionary = build_dictionary(t1g, t2g, spec)
    atoms = dictionary.complex_atoms()
    signal = rng.normal(size=(npix, spec.length)) + 1j * rng.normal(size=(npix, spec.length))

    cases = {
        "laplacian_stencil": (field, 1.0 / 512),
        "bloch_series_batch": (t1, t2, spec.tr, spec.flips,
                               np.array(spec.m0), spec.me),
        "bloch_jacobian_batch": (t1, t2, spec.tr, spec.flips,
                                 np.array(spec.m0), spec.me),
        "match_dictionary": (np.ascontiguousarray(signal.real),
                             np.ascontiguousarray(signal.imag),
                             np.ascontiguousarray(atoms.real),
                             np.ascontiguousarray(atoms.imag)),
    }

    print(f"default binding: {kernels.active_path()}   "
          f"(numba available: {kernels.HAVE_NUMBA})")
    print(f"{'kernel':<22} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, case in cases.items():
        paths = kernels.IMPLEMENTATIONS[name]
        ref = paths["numpy"](*case)
        t_np = best_of(paths["numpy"], case, args.repeats)
        if paths["numba"] is None:
            print(f"{name:<22} {t_np * 1e3:>10.2f} {'n/a':>10} {'n/a':>8} {'n/a':>11}")
            continue
        out = paths["numba"](*case)  # warm-up compiles before timing
        t_nb = best_of(paths["numba"], case, args.repeats)
        print(f"{name:<22} {t_np * 1e3:>10.2f} {t_nb * 1e3:>10.2f} "
              f"{t_np / t_nb:>7.1f}x {max_gap(ref, out):>11.2e}")


if __name__ == "__main__":
    main()
