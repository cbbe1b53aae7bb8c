"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--size 1000000] [--dim 512] [--repeat 3]

Times minifloat encoding and a full GPTQ solve under each available backend
and checks that both produce identical codes.
"""

import argparse
import time

import numpy as np

from fpq import _backend, formats
from fpq.gptq import build_hessian, gptq_quantize
from fpq.spec import parse_spec


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=1_000_000, help="elements to encode")
    p.add_argument("--dim", type=int, default=512, help="GPTQ weight is dim x dim")
    p.add_argument("--block", type=int, default=128)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal(args.size) * 100
    W = rng.standard_normal((args.dim, args.dim))
    hess = build_hessian(rng.standard_normal((4 * args.dim, args.dim)))
    spec = parse_spec("fp4:e2m1:group128")

    backends = sorted(_backend.BACKENDS)
    results = {}
    previous = _backend.name
    try:
        for name in backends:
            _backend.use(name)
            t_enc, codes = best_of(lambda: formats.encode_nearest(x, formats.E4M3), args.repeat)
            t_gptq, q = best_of(lambda: gptq_quantize(W, hess, spec, block_size=args.block), args.repeat)
            results[name] = (t_enc, t_gptq, codes, q.codes)
    finally:
        _backend.use(previous)

    print(f"{'backend':<8} {'encode e4m3':>14} {'gptq ' + str(args.dim) + 'x' + str(args.dim):>16}")
    for name in backends:
        t_enc, t_gptq, _, _ = results[name]
        print(f"{name:<8} {t_enc * 1e3:>11.1f} ms {t_gptq * 1e3:>13.1f} ms")
    if len(backends) == 2:
        a, b = (results[n] for n in backends)
        print(f"speedup (python/cython): encode {results['python'][0] / results['cython'][0]:.1f}x, "
              f"gptq {results['python'][1] / results['cython'][1]:.1f}x")
        same = np.array_equal(a[2], b[2]) and np.array_equal(a[3], b[3])
        print(f"identical codes: {same}")


if __name__ == "__main__":
    main()
