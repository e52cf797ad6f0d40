"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--quick]

Prints the best-of-N wall time per kernel for each backend and the speed-up.
Both backends are imported directly, so the environment switch is not needed.
"""

import argparse
import timeit

import numpy as np

from vocalscreen import _fallback

try:
    from vocalscreen import _ext
except ImportError:  # extension not built
    _ext = None


def _rbf_problem(n, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 10))
    y = np.where(X[:, 0] + 0.5 * rng.normal(size=n) > 0, 1.0, -1.0)
    sq = (X ** 2).sum(1)
    return np.exp(-0.1 * (sq[:, None] + sq[None, :] - 2 * X @ X.T)), y


def cases(quick):
    rng = np.random.default_rng(1)
    n_svm = 300 if quick else 1000
    K, y = _rbf_problem(n_svm)
    x = rng.normal(size=(32, 16, 60, 76)).astype(np.float32)
    out, arg = _fallback.maxpool2x2_forward(x)
    dout = rng.normal(size=out.shape).astype(np.float32)
    img = rng.normal(size=(32, 8, 60, 76)).astype(np.float32)
    Hp, Wp = img.shape[2:]
    cols = _fallback.im2col(img, 3, 3, 1).reshape(32, Hp - 2, Wp - 2, 8, 3, 3)
    yield f"smo_solve n={n_svm}", lambda m: m.smo_solve(K, y, 10.0)
    yield "maxpool fwd 32x16x60x76", lambda m: m.maxpool2x2_forward(x)
    yield "maxpool bwd 32x16x60x76", lambda m: m.maxpool2x2_backward(dout, arg, 60, 76)
    yield "im2col 3x3 32x8x60x76", lambda m: m.im2col(img, 3, 3, 1)
    yield "col2im 3x3 32x8x60x76", lambda m: m.col2im(cols, Hp, Wp, 1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="smaller SVM problem")
    args = ap.parse_args()
    if _ext is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`")
    print(f"{'kernel':<28}{'python ms':>12}{'compiled ms':>14}{'speed-up':>10}")
    for name, fn in cases(args.quick):
        t_py = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat)) * 1e3
        if _ext is None:
            print(f"{name:<28}{t_py:>12.2f}{'-':>14}{'-':>10}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_ext), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<28}{t_py:>12.2f}{t_c:>14.2f}{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()
