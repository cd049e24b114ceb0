"""Compare the compiled and pure-Python kernels on safety-filter sized problems.

Run with ``python benchmarks/bench_kernels.py``. Both backends are imported
directly, so the environment switch does not matter here.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from dsrl import _core_py

try:
    from dsrl import _core
except ImportError:  # extension not built
    _core = None


def random_filter_qp(rng: np.random.Generator, m: int = 3, rows: int = 2):
    u_rl = rng.uniform(-1.5, 1.5, m)
    G = np.vstack([rng.normal(size=(rows, m)), np.eye(m), -np.eye(m)])
    h = np.concatenate([rng.normal(size=rows), np.ones(m), np.ones(m)])
    return 2.0 * np.eye(m), -2.0 * u_rl, G, h, np.zeros((0, m)), np.zeros(0)


def bench(module, problems, kkt, repeat: int) -> tuple[float, float]:
    def solve_all():
        for p in problems:
            module.solve_qp_dense(*p, 200)

    def lu_all():
        for K, B in kkt:
            module.lu_solve(K, B)

    qp = min(timeit.repeat(solve_all, number=1, repeat=repeat)) / len(problems)
    lu = min(timeit.repeat(lu_all, number=1, repeat=repeat)) / len(kkt)
    return qp, lu


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--problems", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    problems = [random_filter_qp(rng) for _ in range(args.problems)]
    kkt = []
    for _ in range(args.problems):
        K = rng.normal(size=(10, 10)) + 10.0 * np.eye(10)
        kkt.append((K, rng.normal(size=(10, 7))))
    rows = [("python", _core_py)] + ([("cython", _core)] if _core is not None else [])
    results = {name: bench(mod, problems, kkt, args.repeat) for name, mod in rows}
    print(f"{'backend':<8} {'solve_qp_dense [us]':>20} {'lu_solve 10x10x7 [us]':>22}")
    for name, (qp, lu) in results.items():
        print(f"{name:<8} {qp * 1e6:>20.1f} {lu * 1e6:>22.1f}")
    if "cython" in results:
        py, cy = results["python"], results["cython"]
        print(f"speedup  {py[0] / cy[0]:>20.1f}x {py[1] / cy[1]:>21.1f}x")
    else:
        print("compiled extension not available")


if __name__ == "__main__":
    main()
