"""Compiled vs pure-Python timings for the dynamic-programming kernels.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each case is checked for agreement before it is timed.
"""

import argparse
import timeit

import numpy as np

from aejoint.kernels import _fallback

try:
    from aejoint.kernels import _ckernels
except ImportError:  # built without the extension
    _ckernels = None


def edit_case(n, rng):
    ref = rng.integers(0, 50, n).astype(np.int64)
    hyp = ref.copy()
    flips = rng.random(n) < 0.2
    hyp[flips] = rng.integers(0, 50, flips.sum())
    return ref, np.delete(hyp, rng.integers(0, n, n // 10))


def ctc_case(frames, labels, k, rng):
    logits = rng.standard_normal((frames, k))
    lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return np.ascontiguousarray(lp), rng.integers(1, k, labels).astype(np.int64)


def bench(fn, repeat):
    t = timeit.Timer(fn)
    number, _ = t.autorange()
    return min(t.repeat(repeat, number)) / number


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    cases = []
    for n in (20, 100, 400):
        ref, hyp = edit_case(n, rng)
        cases.append((f"edit_distance n={n}",
                      lambda r=ref, h=hyp: _fallback.edit_distance(r, h),
                      (lambda r=ref, h=hyp: _ckernels.edit_distance(r, h)) if _ckernels else None))
    for frames, labels in ((50, 10), (200, 40), (800, 120)):
        lp, tgt = ctc_case(frames, labels, 29, rng)
        cases.append((f"ctc_nll T={frames} L={labels}",
                      lambda a=lp, t=tgt: _fallback.ctc_nll(a, list(t), 0),
                      (lambda a=lp, t=tgt: _ckernels.ctc_nll(a, t, 0)) if _ckernels else None))

    print(f"{'case':<26}{'python':>12}{'cython':>12}{'speedup':>10}")
    for name, py, cy in cases:
        t_py = bench(py, args.repeat)
        if cy is None:
            print(f"{name:<26}{t_py * 1e6:>10.1f}us{'n/a':>12}{'':>10}")
            continue
        a, b = py(), cy()
        assert abs(float(a) - float(b)) <= 1e-9 * max(1.0, abs(float(a))), (name, a, b)
        t_cy = bench(cy, args.repeat)
        print(f"{name:<26}{t_py * 1e6:>10.1f}us{t_cy * 1e6:>10.1f}us{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
