"""Time the numba kernels against their numpy fallbacks.

Run: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from mulaaip import kernels
from mulaaip._accel import NUMBA_AVAILABLE


def best_of(fn, repeat):
    fn()  # warm-up (includes JIT compile on first call)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    coords = rng.normal(0.0, 15.0, (600, 3))
    x = rng.uniform(0.0, 40.0, 20000)
    seg = np.sort(rng.integers(0, 500, 20000))
    vals = rng.normal(size=(20000, 32))
    logits = rng.normal(size=20000)
    return {
        "radius_pairs (600 atoms, 10 A)": ("radius_pairs", (coords, 10.0)),
        "spherical_jn_table (lmax 6, 20k)": ("spherical_jn_table", (6, x)),
        "segment_sum (20k x 32 -> 500)": ("segment_sum", (vals, seg, 500)),
        "segment_softmax (20k -> 500)": ("segment_softmax", (logits, seg, 500)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not NUMBA_AVAILABLE:
        print("numba not installed; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<36}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for label, (name, call_args) in cases(rng).items():
        np_fn = getattr(kernels, f"{name}_numpy")
        nb_fn = getattr(kernels, f"{name}_numba")
        t_np = best_of(lambda: np_fn(*call_args), args.repeat)
        t_nb = best_of(lambda: nb_fn(*call_args), args.repeat)
        print(f"{label:<36}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
