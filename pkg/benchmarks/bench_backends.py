"""Time the numpy and numba flavour of every kernel on the same inputs.

    python3 benchmarks/bench_backends.py [--repeat 7] [--json out.json]

Each kernel is run once untimed (numba compiles there), then ``--repeat``
times; the median wall time is reported along with a check that both
flavours returned identical bytes.
"""

import argparse
import json
import statistics
import time

import numpy as np

from qmoe.kernels import HAVE_NUMBA, IMPLEMENTATIONS


def cases(rng):
    a = rng.standard_normal((256, 1024)).astype(np.float32)
    b = rng.standard_normal((1024, 320)).astype(np.float32)
    codes = rng.integers(0, 16, 200_000).astype(np.uint32)
    from qmoe.kernels import pack_stream

    packed = pack_stream(codes, 4)
    bits = (rng.random((512, 1024)) > 0.5).astype(np.uint8)
    from qmoe.kernels import pack_rows

    xw = pack_rows(bits[:256])
    ww = pack_rows(bits[256:])
    w = rng.standard_normal(640 * 1024).astype(np.float32)
    n = 640 * 1024
    adam_args = lambda: (  # noqa: E731
        rng_copy(w), rng_copy(w * 0.1), np.zeros(n, np.float32), np.zeros(n, np.float32),
        np.float32(1e-3), np.float32(0.9), np.float32(0.999), np.float32(0.1),
        np.float32(0.001), np.float32(1e-8), np.float32(1.0))
    return {
        "matmul": lambda: (a, b),
        "pack_stream": lambda: (codes, 4),
        "unpack_stream": lambda: (packed, 4, codes.size),
        "pack_rows": lambda: (bits,),
        "xor_popcount": lambda: (xw, ww),
        "bitlinear_round": lambda: (w, float(w.mean()), 7.0, float(w.max() - w.min())),
        "adam": adam_args,
    }


def rng_copy(x):
    return np.array(x, copy=True)


def _result_bytes(out, args):
    if out is None:  # in-place kernels: compare the updated first argument
        return np.asarray(args[0]).tobytes()
    return np.asarray(out).tobytes()


def time_kernel(func, make_args, repeat):
    args = make_args()
    out = func(*args)
    ref = _result_bytes(out, args)
    times = []
    for _ in range(repeat):
        args = make_args()
        start = time.perf_counter()
        func(*args)
        times.append(time.perf_counter() - start)
    return statistics.median(times) * 1e3, ref


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=7)
    p.add_argument("--json", help="also write results here")
    args = p.parse_args(argv)
    if not HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rows = []
    for name, make in cases(np.random.default_rng(0)).items():
        t_np, r_np = time_kernel(IMPLEMENTATIONS[name]["numpy"], make, args.repeat)
        t_nb, r_nb = time_kernel(IMPLEMENTATIONS[name]["numba"], make, args.repeat)
        rows.append({"kernel": name, "numpy_ms": t_np, "numba_ms": t_nb,
                     "speedup": t_np / t_nb, "identical": r_np == r_nb})

    print(f"{'kernel':<16}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  identical")
    for r in rows:
        print(f"{r['kernel']:<16}{r['numpy_ms']:>10.2f}{r['numba_ms']:>10.2f}"
              f"{r['speedup']:>8.1f}x  {r['identical']}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
