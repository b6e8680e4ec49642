"""Time the compiled kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--n 1000000] [--repeat 5]

Both implementations are checked for identical output before timing.
"""
import argparse
import timeit

import numpy as np

from cfsim import _kernels as K


def _inputs(n, seed=0):
    gen = np.random.default_rng(seed)
    w = gen.exponential(size=n)
    cumw = np.cumsum(w) / w.sum()
    cumw[-1] = 1.0
    u = gen.random(n)
    mat = gen.normal(size=(n, 6))
    mat[1::2] = mat[0:n - 1:2][: mat[1::2].shape[0]]  # half the rows are duplicates
    f_sorted = np.sort(gen.random(n))
    return cumw, u, mat, f_sorted


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba unavailable (or CFSIM_DISABLE_NUMBA set); nothing to compare")
        return 1
    cumw, u, mat, f_sorted = _inputs(args.n)
    pairs = {
        "multinomial_indices": (K.np_multinomial_indices, K.nb_multinomial_indices, (cumw, u)),
        "systematic_indices": (K.np_systematic_indices, K.nb_systematic_indices, (cumw, 0.37, args.n)),
        "row_hashes": (K.np_row_hashes, K.nb_row_hashes, (mat,)),
        "ks_sup": (K.np_ks_sup, K.nb_ks_sup, (f_sorted,)),
    }
    print(f"n = {args.n}, best of {args.repeat}")
    print(f"{'kernel':<22}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, (f_np, f_nb, a) in pairs.items():
        r_np, r_nb = f_np(*a), f_nb(*a)  # also compiles
        if not np.array_equal(np.asarray(r_np), np.asarray(r_nb)):
            raise SystemExit(f"{name}: implementations disagree")
        t_np = min(timeit.repeat(lambda: f_np(*a), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: f_nb(*a), number=1, repeat=args.repeat))
        print(f"{name:<22}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>10.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
