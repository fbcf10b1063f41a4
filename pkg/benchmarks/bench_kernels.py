"""Time the numba kernels against their numpy twins and check they agree.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from spare_lab._kernels import numba_kernels, numpy_kernels


def _mlp_case(rng, n=1000, d_in=22, d_out=18, hidden=(150, 150), epochs=5, batch=32):
    sizes = np.array([d_in, *hidden, d_out], dtype=np.int64)
    n_params = sum(int(a * b + b) for a, b in zip(sizes[:-1], sizes[1:]))
    params = rng.normal(0, 0.05, n_params)
    xs = rng.normal(size=(n, d_in))
    target = rng.normal(size=(n, d_out))
    aux = np.ones((n, d_out))
    w = np.ones(n)
    perms = np.stack([rng.permutation(n) for _ in range(epochs)])

    def run(k):
        p = params.copy()
        k.run_epochs(p, np.zeros(n_params), np.zeros(n_params), np.zeros(n_params), 0, sizes, 0, xs, target,
                     aux, w, perms, batch, 0, 1e-3, 0.9, 0.999, 1e-7, np.full(d_out, 1e-4))
        return p
    return run


def _mixture_case(rng, n_obj=10, n_slots=4, n_prop=6):
    obs, cur = rng.normal(size=(n_obj, n_prop)), rng.normal(size=(n_obj, n_prop))
    mu, var = rng.normal(size=(n_slots, n_prop)), rng.uniform(0.1, 1, (n_slots, n_prop))
    member = (rng.uniform(size=(n_slots, n_obj)) < 0.3).astype(np.uint8)
    vdef = rng.uniform(0.1, 1, n_prop)
    return lambda k: k.mixture_logpdf(obs, cur, mu, var, member, vdef)


def _kmeans_case(rng, n=1250, d=60, k=3):
    pts, centers = rng.normal(size=(n, d)), rng.normal(size=(k, d))
    return lambda kern: kern.kmeans_assign(pts, centers)[1]


def _support_case(rng, n=10):
    xyz = rng.uniform(0, 0.3, (n, 3))
    dims = rng.uniform(0.04, 0.1, (n, 3))
    return lambda k: k.support_matrix(xyz, dims, 1e-6)


def _pairwise_case(rng, n=10):
    xyz = rng.normal(size=(n, 3))
    return lambda k: k.pairwise_sqdist(xyz)


CASES = {
    "run_epochs (5 epochs, 1000x22->18)": (_mlp_case, 1),
    "mixture_logpdf (10 objects)": (_mixture_case, 2000),
    "kmeans_assign (1250x60, k=3)": (_kmeans_case, 200),
    "support_matrix (10 blocks)": (_support_case, 5000),
    "pairwise_sqdist (10 blocks)": (_pairwise_case, 5000),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if numba_kernels is None:
        raise SystemExit("numba is not installed")
    print(f"{'kernel':38s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  agree")
    for name, (make, number) in CASES.items():
        run = make(np.random.default_rng(0))
        a, b = run(numpy_kernels), run(numba_kernels)  # also compiles the numba path
        agree = np.allclose(a, b, rtol=1e-9, atol=1e-9)
        t_np = min(timeit.repeat(lambda: run(numpy_kernels), number=number, repeat=args.repeat)) / number
        t_nb = min(timeit.repeat(lambda: run(numba_kernels), number=number, repeat=args.repeat)) / number
        print(f"{name:38s} {1e3 * t_np:10.4f} {1e3 * t_nb:10.4f} {t_np / t_nb:8.1f}  {agree}")


if __name__ == "__main__":
    main()
