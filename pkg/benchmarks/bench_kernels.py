"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--n 500]
"""
import argparse
import timeit

import numpy as np

from hmae import kernels


def _cases(n, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 64))
    sq = (X * X).sum(1)
    d = np.ascontiguousarray(np.maximum(sq[:, None] + sq[None] - 2 * X @ X.T, 0.0))
    np.fill_diagonal(d, 0.0)
    P = rng.random((n, n))
    P = P + P.T
    np.fill_diagonal(P, 0.0)
    P /= P.sum()
    Y = np.ascontiguousarray(rng.normal(size=(n, 2)))
    img = np.ascontiguousarray(rng.random((900, 900, 3)))
    return {
        "perplexity search": lambda b: b.binary_search_perplexity(d, 30.0, 1e-5, 200),
        "t-SNE gradient": lambda b: b.tsne_gradient(P, Y, 1.0),
        "bilinear resize": lambda b: b.resize_bilinear(img, 224, 224),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=500, help="points for the t-SNE kernels")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = {"python": kernels.get_backend("python")}
    try:
        backends["cython"] = kernels.get_backend("cython")
    except ImportError:
        print("compiled extension not built; timing the fallback only")

    print(f"{'kernel':<20}" + "".join(f"{name:>12}" for name in backends) + f"{'speedup':>10}")
    for label, fn in _cases(args.n).items():
        best = {}
        for name, b in backends.items():
            fn(b)  # warm-up
            best[name] = min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat))
        row = f"{label:<20}" + "".join(f"{best[k] * 1e3:>10.2f}ms" for k in backends)
        if "cython" in best:
            row += f"{best['python'] / best['cython']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
