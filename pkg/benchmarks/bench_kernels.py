"""Time each kernel under every importable backend.

    python3 benchmarks/bench_kernels.py [--n 20000] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from ttekit import kernels


def cases(n: int, rng: np.random.Generator):
    P = 8
    bounds = np.linspace(0.0, 730.0, P + 1)
    d = rng.uniform(0, 900, size=n)
    e = rng.random(n) < 0.6
    eta = rng.normal(-5, 0.5, size=(n, P))
    t = np.round(rng.uniform(0, 365, size=n))
    s = rng.normal(size=n)
    m = min(n, 5000)  # concordance is quadratic
    return {
        "piece_exposure": lambda k: k.piece_exposure(d, bounds),
        "pe_loss_grad": lambda k: k.pe_loss_grad(d, e, eta, bounds),
        "cox_breslow": lambda k: k.cox_breslow(t, e, s),
        f"concordance_counts (n={m})": lambda k: k.concordance_counts(t[:m], e[:m], s[:m]),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.backends()
    rng = np.random.default_rng(0)
    print(f"n={args.n}, best of {args.repeat}; selected backend: {kernels.BACKEND}")
    print(f"{'kernel':32s}" + "".join(f"{name:>14s}" for name in backends) + ("   speedup" if len(backends) > 1 else ""))
    for label, fn in cases(args.n, rng).items():
        times = {
            name: min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat)) for name, impl in backends.items()
        }
        row = f"{label:32s}" + "".join(f"{times[name] * 1e3:12.2f}ms" for name in backends)
        if "compiled" in times:
            row += f"   {times['python'] / times['compiled']:6.1f}x"
        print(row)


if __name__ == "__main__":
    main()
