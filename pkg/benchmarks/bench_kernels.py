"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 20] [--sizes 16 64 256]

Both flavours are imported directly, so the MLCL_DISABLE_NUMBA flag does not
matter here. The first jit call (compilation or cache load) is excluded.
"""

import argparse
import timeit

import numpy as np

from mlcl import kernels


def cases(n, rng):
    z = rng.standard_normal((n, 32))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    y = rng.integers(0, 5, size=n)
    mask = (y[:, None] == y[None, :]) & ~np.eye(n, dtype=bool)
    levels = rng.integers(0, 3, size=(n, 7))
    emb = rng.standard_normal((n, 64))
    return {
        "contrastive_terms": (kernels.contrastive_terms_jit, kernels.contrastive_terms_numpy,
                              (z, mask, np.ones((n, n)), 0.1)),
        "jaccard_matrix": (kernels.jaccard_matrix_jit, kernels.jaccard_matrix_numpy, (levels,)),
        "knn_agreement": (kernels.knn_agreement_jit, kernels.knn_agreement_numpy, (emb, y, 10)),
    }


def best_of(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--sizes", type=int, nargs="+", default=[16, 64, 256, 1024])
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(args.seed)

    print(f"{'kernel':<18} {'n':>6} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for n in args.sizes:
        for name, (jit_fn, np_fn, fargs) in cases(n, rng).items():
            jit_fn(*fargs)
            t_jit = best_of(jit_fn, fargs, args.repeat)
            t_np = best_of(np_fn, fargs, args.repeat)
            print(f"{name:<18} {n:>6} {1e3 * t_jit:>10.3f} {1e3 * t_np:>10.3f} {t_np / t_jit:>7.1f}x")


if __name__ == "__main__":
    main()
