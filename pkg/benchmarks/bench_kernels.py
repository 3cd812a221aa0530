"""Benchmark the compiled state-evolution kernels against the numpy fallback.

Run:  python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np
from scipy import sparse

from xsrc import kernels


def make_case(d_r, d_in, n_steps, density, seed=0):
    gen = np.random.default_rng(seed)
    W = sparse.random(d_r, d_r, density=density, random_state=gen, format="csr")
    W.data = gen.normal(0, 1 / np.sqrt(max(density * d_r, 1)), W.data.shape)
    W.indices = W.indices.astype(np.int32)
    W.indptr = W.indptr.astype(np.int32)
    W_in = gen.uniform(-0.2, 0.2, (d_r, d_in))
    inputs = gen.normal(size=(n_steps, d_in))
    return W, W_in, inputs


def time_drive(backend, W, W_in, inputs, repeats=5):
    proj = inputs @ W_in.T
    r0 = np.zeros(W.shape[0])
    kernels.drive(W, proj, r0, 0.5, backend=backend)  # warm up
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        kernels.drive(W, proj, r0, 0.5, backend=backend)
        best = min(best, time.perf_counter() - start)
    return best


def time_step(backend, W, W_in, inputs, repeats=200):
    r = np.zeros(W.shape[0])
    u = inputs[0]
    kernels.step(W, W_in, u, r, 0.5, backend=backend)
    start = time.perf_counter()
    for _ in range(repeats):
        kernels.step(W, W_in, u, r, 0.5, backend=backend)
    return (time.perf_counter() - start) / repeats


def main():
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (default {kernels.backend_name()})")
    cases = [
        ("small tile", 200, 256, 2000, 0.05),
        ("mid tile", 300, 400, 2000, 0.05),
        ("paper-size tile", 1250, 300, 2000, 0.02),
    ]
    header = f"{'case':<16} {'d_r':>5} {'d_in':>5} {'steps':>6} "
    header += "".join(f"{b + ' drive':>14}" for b in backends)
    header += "".join(f"{b + ' step':>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'drive speedup':>15}"
    print(header)
    for name, d_r, d_in, n, density in cases:
        W, W_in, inputs = make_case(d_r, d_in, n, density)
        drive_times = {b: time_drive(b, W, W_in, inputs) for b in backends}
        step_times = {b: time_step(b, W, W_in, inputs) for b in backends}
        row = f"{name:<16} {d_r:>5} {d_in:>5} {n:>6} "
        row += "".join(f"{drive_times[b] * 1e3:>12.2f}ms" for b in backends)
        row += "".join(f"{step_times[b] * 1e6:>12.1f}us" for b in backends)
        if len(backends) == 2:
            row += f"{drive_times['pure'] / drive_times['native']:>14.1f}x"
        print(row)
        a = kernels.drive(W, inputs @ W_in.T, np.zeros(d_r), 0.5, backend=backends[0])
        b = kernels.drive(W, inputs @ W_in.T, np.zeros(d_r), 0.5, backend=backends[-1])
        gap = np.abs(a - b).max()
        print(f"{'':<16} backend agreement: max |delta state| = {gap:.2e}")


if __name__ == "__main__":
    main()
