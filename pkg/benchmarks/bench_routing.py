"""Time routing forward+backward: compiled kernels vs numpy kernels vs composed ops.

    python benchmarks/bench_routing.py [--positions 200] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from capsattn import kernels, routing
from capsattn import tensor as T


def _step(kind, votes, beta, fused, backend):
    votes.grad = None
    if kind == "dynamic":
        out, _ = routing.dynamic_route(votes, 3, fused=fused, backend=backend)
    else:
        out, _ = routing.em_route(votes, beta, beta, 3, fused=fused, backend=backend)
    out.sum().backward()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--positions", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    paths = [(f"fused/{name}", True, name) for name in kernels.available()] + [("composed", False, None)]
    print(f"backends available: {', '.join(kernels.available())}")
    print(f"{'routing':<8} {'h,l,d':<10} {'path':<16} {'ms/iter':>9}")
    with T.precision(np.float64):
        for kind in ("dynamic", "em"):
            for h, l, d in ((4, 4, 16), (8, 8, 64)):
                votes = T.Tensor(rng.standard_normal((args.positions, h, l, d)) * 0.3, requires_grad=True)
                beta = T.Tensor(np.zeros(l), requires_grad=True)
                for label, fused, backend in paths:
                    best = min(
                        timeit.repeat(lambda: _step(kind, votes, beta, fused, backend), number=1, repeat=args.repeat)
                    )
                    print(f"{kind:<8} {f'{h},{l},{d}':<10} {label:<16} {best * 1e3:>9.2f}")


if __name__ == "__main__":
    main()
