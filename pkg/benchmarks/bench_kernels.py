"""Time the compiled kernels against the numpy fallback on desk- and reference-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20] [--csv out.csv]

Both backends are also checked to return identical results on every input.
"""
import argparse
import csv
import sys
import timeit

import numpy as np

from splitfed import _fallback

try:
    from splitfed import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    # (label, kernel name, args) at shapes the training loop actually hits
    for n, c, length, k, s in [(32, 1, 256, 16, 1), (32, 16, 256, 8, 2), (32, 32, 256, 16, 1)]:
        out_len = -(-length // s)
        padded = (out_len - 1) * s + k
        xp = np.ascontiguousarray(rng.standard_normal((n, c, padded)).astype(np.float32))
        dcols = np.ascontiguousarray(rng.standard_normal((n, out_len, c * k)).astype(np.float32))
        yield f"im2col n={n} c={c} k={k} s={s}", "im2col", (xp, k, s, out_len)
        yield f"col2im n={n} c={c} k={k} s={s}", "col2im", (dcols, c, k, s, padded)
    for numel, frac in [(8192, 0.1), (262144, 0.1), (262144, 0.01)]:
        flat = rng.standard_normal(numel).astype(np.float32)
        yield f"topk n={numel} K={frac}", "topk_indices", (flat, max(1, int(numel * frac)))
    ties = (rng.integers(-2, 3, 262144) * 0.5).astype(np.float32)
    yield "topk n=262144 K=0.1 heavy ties", "topk_indices", (ties, 26214)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", help="also write results here")
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1

    rows = []
    print(f"{'case':38} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for label, name, call_args in cases(np.random.default_rng(args.seed)):
        py_fn, cy_fn = getattr(_fallback, name), getattr(_kernels, name)
        if not np.array_equal(py_fn(*call_args), cy_fn(*call_args)):
            print(f"backend mismatch on {label}", file=sys.stderr)
            return 1
        t_py = min(timeit.repeat(lambda: py_fn(*call_args), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: cy_fn(*call_args), number=1, repeat=args.repeat)) * 1e3
        rows.append((label, t_py, t_cy, t_py / t_cy))
        print(f"{label:38} {t_py:10.3f} {t_cy:10.3f} {t_py / t_cy:7.2f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case", "numpy_ms", "cython_ms", "speedup"])
            w.writerows((r[0], f"{r[1]:.4f}", f"{r[2]:.4f}", f"{r[3]:.3f}") for r in rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
