"""Three hypergradient estimators on a scalar quadratic bilevel problem.

Inner loss ``a*theta^2/2 - b*phi*theta`` has minimizer ``theta* = b*phi/a``;
with outer loss ``theta^2/2`` the exact hypergradient is ``b^2*phi/a^2``.
The script prints the IFT/Neumann estimate for growing truncation order next
to the unrolled and finite-difference oracles.

    python3 demos/hypergradient_quadratic.py --a 2 --b 1 --phi 1
"""

import argparse

import numpy as np

from bilopt import autodiff as ad
from bilopt.bilevel import (
    SGD,
    Bilevel,
    HypergradConfig,
    hypergrad_finite_difference,
    hypergrad_ift_neumann,
    hypergrad_unrolled,
    inner_loop,
)


def make_problem(a: float, b: float) -> Bilevel:
    def inner(th, ph, batch):
        t = th[0]
        return ad.sub(ad.mul(0.5 * a, ad.mul(t, t)), ad.mul(b, ad.mul(ph[0], t)))

    def outer(th, batch):
        return ad.mul(0.5, ad.mul(th[0], th[0]))

    return Bilevel(inner, outer)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--a", type=float, default=2.0)
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--phi", type=float, default=1.0)
    p.add_argument("--K", type=int, default=40)
    args = p.parse_args()

    problem = make_problem(args.a, args.b)
    theta0, phi = [np.array(0.0)], [np.array(args.phi)]
    batches = [None] * args.K
    exact = args.b**2 * args.phi / args.a**2
    print(f"exact hypergradient: {exact:.8f}")
    for M in (0, 1, 2, 5, 10, 30, 60):
        cfg = HypergradConfig(K=args.K, M=M, gamma=0.5 / args.a, inner_lr=0.5 / args.a)
        theta_k, _ = inner_loop(problem, theta0, phi, batches, cfg, SGD(cfg.inner_lr))
        ift = float(hypergrad_ift_neumann(problem, theta_k, phi, None, None, cfg)[0])
        print(f"  IFT/Neumann M={M:<3d} {ift:.8f}")
    cfg = HypergradConfig(K=args.K, M=60, gamma=0.5 / args.a, inner_lr=0.5 / args.a)
    print(f"  unrolled          {float(hypergrad_unrolled(problem, theta0, phi, batches, None, cfg)[0]):.8f}")
    print(f"  finite difference {float(hypergrad_finite_difference(problem, theta0, phi, batches, None, cfg)[0]):.8f}")


if __name__ == "__main__":
    main()
