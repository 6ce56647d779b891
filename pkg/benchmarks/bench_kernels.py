"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py --rows 20000 --cols 5000 --per-row 40 --f 32

Both backends see identical inputs; the script also checks that their
outputs agree bit for bit before reporting.
"""

import argparse
import time

import numpy as np

from alsgrid import kernels


def make_problem(rows, cols, per_row, f, seed):
    rng = np.random.default_rng(seed)
    per_row = min(per_row, cols)
    width = cols // per_row
    col_idx = (rng.integers(0, width, size=(rows, per_row)) + np.arange(per_row) * width).astype(np.int32)
    values = rng.uniform(1, 5, size=rows * per_row).astype(np.float32)
    row_ptr = np.arange(rows + 1, dtype=np.int64) * per_row
    theta = rng.random((cols, f), dtype=np.float32)
    return row_ptr, col_idx.ravel(), values, theta


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=20_000)
    ap.add_argument("--cols", type=int, default=5_000)
    ap.add_argument("--per-row", type=int, default=40)
    ap.add_argument("--f", type=int, default=32)
    ap.add_argument("--bin", type=int, default=16)
    ap.add_argument("--lam", type=float, default=0.05)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--single", action="store_true", help="accumulate in float32")
    args = ap.parse_args(argv)

    row_ptr, col_idx, values, theta = make_problem(args.rows, args.cols, args.per_row, args.f, args.seed)
    dtype = np.float32 if args.single else np.float64
    nnz = len(values)
    print(f"rows={args.rows} cols={args.cols} nnz={nnz:,} f={args.f} bin={args.bin} "
          f"accumulate={np.dtype(dtype).name}")

    results = {}
    for name, mod in sorted(kernels.backends().items()):
        a = np.empty((args.rows, args.f, args.f), dtype)
        b = np.empty((args.rows, args.f), dtype)
        x = np.empty((args.rows, args.f), np.float32)

        def assemble():
            mod.hermitian_rows(row_ptr, col_idx, values, theta, 0, args.lam, args.bin, 0, args.rows, a, b)
            return a.copy(), b.copy()

        def solve():
            failed = mod.solve_rows(a, b, x, 0, args.rows)
            return x.copy(), failed

        t_asm, (a_out, b_out) = best_of(assemble, args.repeat)
        t_sol, (x_out, failed) = best_of(solve, args.repeat)
        results[name] = (t_asm, t_sol, a_out, b_out, x_out)
        gflops = nnz * args.f * (args.f + 1) / t_asm / 1e9  # lower triangle multiply-adds
        print(f"{name:>9}: assemble {t_asm * 1e3:9.1f} ms ({gflops:5.2f} GFLOP/s)   "
              f"solve {t_sol * 1e3:9.1f} ms   breakdown index {failed}")

    if len(results) == 2:
        c, p = results["compiled"], results["python"]
        same = all(np.array_equal(c[k], p[k]) for k in (2, 3, 4))
        print(f"speed-up: assemble {p[0] / c[0]:.1f}x, solve {p[1] / c[1]:.1f}x; outputs bit-equal: {same}")
    else:
        print("compiled core not available; only the fallback was timed")


if __name__ == "__main__":
    main()
