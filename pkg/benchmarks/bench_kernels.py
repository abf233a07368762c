"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Both backends are imported directly, so the HCASR_NUMBA flag does not matter
here. The first numba call (compilation) is excluded from the timings.
"""

import argparse
import time

import numpy as np

from hcasr.kernels import _numba, _numpy


def _log_softmax(x):
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


def cases(rng):
    T, C, U = 60, 9, 10
    lp = _log_softmax(rng.normal(size=(T, C)))
    target = rng.integers(1, C, size=U)
    ext = np.zeros(2 * U + 1, dtype=np.int64)
    ext[1::2] = target
    H = 16
    r_n = np.log(rng.uniform(size=(H, T)))
    r_b = np.log(rng.uniform(size=(H, T)))
    last = rng.integers(-1, C, size=H).astype(np.int64)
    last[last == 0] = 1
    tokens = np.arange(1, C, dtype=np.int64)
    ref = rng.integers(0, 8, size=200).astype(np.int64)
    hyp = rng.integers(0, 8, size=190).astype(np.int64)
    return {
        "ctc_forward_backward": (lp, ext),
        "ctc_prefix_extend": (lp, r_n, r_b, last, tokens),
        "edit_ops": (ref, hyp),
    }


def bench(fn, args, repeat):
    fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':24s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, inputs in cases(rng).items():
        t_nb = bench(getattr(_numba, name), inputs, args.repeat)
        t_np = bench(getattr(_numpy, name), inputs, args.repeat)
        print(f"{name:24s} {1e3 * t_nb:10.3f} {1e3 * t_np:10.3f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
