"""Time the numba and numpy kernel paths on workloads of realistic size.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel runs once per backend untimed (numba compiles or loads its cache
then), then ``repeat`` timed runs; the best time is reported along with the
largest difference between the two outputs.
"""

import argparse
import time

import numpy as np

from drone_audition import _accel, kernels


def harmonic_case(rng):
    # 10 s of 4 rotors x 30 harmonics on 8 channels at 8 kHz
    n = 80000
    f0 = np.array([95.0, 98.0, 102.0, 105.0])
    phase = 2 * np.pi * np.cumsum(np.repeat(f0[:, None], n, axis=1), axis=1) / 8000
    coef = rng.standard_normal((8, 4, 30)) + 1j * rng.standard_normal((8, 4, 30))
    return kernels.harmonic_sum, (phase, coef)


def comb_case(rng):
    sal = np.maximum(rng.standard_normal((400, 513)) * 6.0, 0.0)
    cand = np.arange(50.0, 300.5, 0.5) / 7.8125
    return kernels.comb_scores, (sal, cand, 10)


def ica_case(rng):
    # one 4 s block: 513 bins, 6 whitened components, 64 frames
    Z = rng.laplace(size=(513, 6, 64)) + 1j * rng.laplace(size=(513, 6, 64))
    W0 = np.broadcast_to(np.eye(6, dtype=complex), (513, 6, 6)).copy()
    return kernels.natural_gradient_ica, (Z, W0, 0.1, 200, 1e-6)


CASES = {"harmonic_sum": harmonic_case, "comb_scores": comb_case,
         "natural_gradient_ica": ica_case}


def _first(out):
    return out[0] if isinstance(out, tuple) else out


def best_time(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t)
    return min(times), _first(out)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"{'kernel':<22}{'numpy s':>10}{'numba s':>10}{'speedup':>9}{'max diff':>11}")
    for name, make in CASES.items():
        fn, fargs = make(np.random.default_rng(0))
        _accel.disable_jit()
        t_np, y_np = best_time(fn, fargs, args.repeat)
        _accel.enable_jit()
        t_nb, y_nb = best_time(fn, fargs, args.repeat)
        diff = float(np.max(np.abs(y_np - y_nb)))
        print(f"{name:<22}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x{diff:>11.2e}")


if __name__ == "__main__":
    main()
