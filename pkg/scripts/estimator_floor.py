"""Best reachable MSE of the softmax estimator versus training length.

The estimate is ``x * T(z)`` with a scalar ``T`` per row, so even an ideal
``T`` leaves the residual of projecting softmax(x) onto the line through x.
This script prints that analytic floor next to what training reaches.
"""

import argparse

import numpy as np

from hexform.estimator import train_estimator
from hexform.tensor import Tensor, softmax_exact


def projection_floor(dim, rows=20000, seed=0):
    """MSE of the best per-row scalar c in c * x, i.e. softmax(x) projected onto x."""
    x = np.random.default_rng(seed).uniform(-3, 3, (rows, dim))
    s = softmax_exact(Tensor(x)).data
    c = (s * x).sum(1, keepdims=True) / (x * x).sum(1, keepdims=True)
    return float(((c * x - s) ** 2).mean())


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--steps", type=int, nargs="+", default=[2000, 20000, 100000])
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    print(f"dim={args.dim} projection_floor={projection_floor(args.dim):.3e}")
    print("steps\ttrain_mse\theldout_mse")
    for steps in args.steps:
        _, rep = train_estimator(args.dim, args.seed, steps=steps, strict=False)
        print(f"{steps}\t{rep.train_mse:.3e}\t{rep.heldout_mse:.3e}", flush=True)


if __name__ == "__main__":
    main()
