"""Time each hot kernel under the compiled and the NumPy backend.

    python benchmarks/bench_kernels.py [--points 2048] [--repeat 5]

Prints one row per kernel with the best-of-N wall time for every available
backend and the speedup of the compiled one. Both backends are also checked
for agreement on the benchmark inputs.
"""

import argparse
import time

import numpy as np

from rcp import kernels
from rcp.data_io import make_rng, random_shape
from rcp.geometry import build_index
from rcp.regularizer import knn_graph


def best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def workloads(n, k_omega, seed):
    rng = make_rng(seed)
    cloud = random_shape(n, seed)
    pts = cloud.points
    target = pts + rng.normal(scale=0.01, size=pts.shape)
    index = build_index(target)
    prev = rng.normal(scale=0.01, size=pts.shape)
    cand, _ = index.query(pts + prev, k_omega)
    u = target[cand] - pts[:, None, :]
    fp = rng.normal(size=(n, 7))
    fq = rng.normal(size=(n, 7))
    gp = rng.normal(size=(n, 31))
    gq = rng.normal(size=(n, 31))
    graph = knn_graph(build_index(cloud), 8)
    z = rng.normal(size=pts.shape)
    return {
        "fps": lambda b: kernels.fps(pts, n // 4, 0, backend=b),
        "knn": lambda b: kernels.knn(target, pts, 16, backend=b),
        "attention_update": lambda b: kernels.attention_update(gp, gq, cand, u, 1.0, backend=b),
        "bilateral_update": lambda b: kernels.bilateral_update(fp, fq, cand, u, prev, 0.5, 0.5, backend=b),
        "hard_update": lambda b: kernels.hard_update(fp, fq, cand, u, prev, backend=b),
        "jacobi_sweeps": lambda b: kernels.jacobi_sweeps(z, z, graph.indptr, graph.indices, 1.0, 10, backend=b),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--points", type=int, default=2048)
    parser.add_argument("--k-omega", type=int, default=32)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    backends = kernels.available_backends()
    print(f"points={args.points} k_omega={args.k_omega} backends={','.join(backends)} active={kernels.BACKEND}")
    header = f"{'kernel':<18}" + "".join(f"{b + ' ms':>12}" for b in backends) + f"{'speedup':>10}{'max diff':>11}"
    print(header)
    for name, fn in workloads(args.points, args.k_omega, args.seed).items():
        times, outs = {}, {}
        for b in backends:
            times[b], outs[b] = best_of(lambda: fn(b), args.repeat)
        row = f"{name:<18}" + "".join(f"{times[b] * 1e3:>12.3f}" for b in backends)
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>9.1f}x"
            row += f"{max_diff(outs['python'], outs['cython']):>11.1e}"
        print(row)


if __name__ == "__main__":
    main()
