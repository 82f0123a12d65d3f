"""Softmax estimation network: softmax from add, mul and ReLU only.

For a row of scores ``x`` the estimate is::

    z   = sum_j relu((x_j / 2 + 1) ** 3)
    out = x * T(z)

where ``T`` is a small ReLU network trained so that ``out`` matches the exact
softmax on rows drawn uniformly from [-3, 3]. ``T`` sees ``z / dim`` so its
input stays O(1) whatever the row length; the ``1 / dim`` factor is folded
into the first-layer weights at evaluation time.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DidNotConverge, InvalidSpec
from .optim import AdamW
from .tensor import Tensor, add, backward, blas_matmul, matmul, mse_loss, mul, relu, reshape, sum_

log = logging.getLogger(__name__)

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass
class SoftmaxEstimator:
    dim: int
    params: dict
    frozen: bool = True

    @classmethod
    def init(cls, dim, seed=0, hidden=16):
        if dim < 2:
            raise InvalidSpec(f"estimator row length must be >= 2, got {dim}")
        rng = np.random.default_rng(seed)
        params = {
            "w1": Tensor(rng.normal(0.0, 1.0, hidden)),
            "b1": Tensor(rng.uniform(0.0, 0.5, hidden)),
            "w2": Tensor(rng.normal(0.0, np.sqrt(2.0 / hidden), (hidden, hidden))),
            "b2": Tensor(np.full(hidden, 0.01)),
            "w3": Tensor(rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, 1))),
            "b3": Tensor(np.zeros(1)),
        }
        return cls(dim, params)

    @property
    def hidden(self):
        return self.params["w1"].shape[0]

    def parameters(self):
        return dict(self.params)

    def copy(self, frozen=None):
        return SoftmaxEstimator(
            self.dim,
            {k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.params.items()},
            self.frozen if frozen is None else frozen,
        )

    def reciprocal(self, z):
        """T applied to a trailing singleton axis: (..., 1) -> (..., 1)."""
        p = self.params
        w1 = mul(p["w1"], 1.0 / self.dim)
        h = relu(add(mul(z, w1), p["b1"]))
        h = relu(add(matmul(h, p["w2"]), p["b2"]))
        return add(matmul(h, p["w3"]), p["b3"])


def cubic_mass(x):
    """Row statistic ``sum_j relu((x_j/2 + 1)^3)`` over the last axis (kept)."""
    u = add(mul(x, 0.5), 1.0)
    return sum_(relu(mul(mul(u, u), u)), axis=-1, keepdims=True)


def estimate_softmax(x, est):
    if len(x.shape) == 1:
        return reshape(estimate_softmax(reshape(x, (1, x.shape[0])), est), x.shape)
    return mul(x, est.reciprocal(cubic_mass(x)))


@dataclass
class EstimatorReport:
    dim: int
    seed: int
    steps: int
    train_mse: float
    heldout_mse: float
    converged: bool
    history: list = field(default_factory=list, repr=False)

    def lines(self):
        return [
            f"dim={self.dim}",
            f"seed={self.seed}",
            f"steps={self.steps}",
            f"train_mse={self.train_mse:.6e}",
            f"heldout_mse={self.heldout_mse:.6e}",
            f"converged={str(self.converged).lower()}",
        ]


def _softmax_rows(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def estimator_mse(est, rows):
    """Per-element MSE of the estimate against the exact softmax."""
    with blas_matmul():
        out = estimate_softmax(Tensor(rows), est).data
    return float(np.mean((out - _softmax_rows(rows)) ** 2))


def train_estimator(
    dim,
    seed=0,
    *,
    steps=100_000,
    lr=1e-3,
    batch_size=256,
    pool_size=50_000,
    target_mse=1e-6,
    tolerance=1e-4,
    window=100,
    strict=True,
    hidden=16,
):
    """Fit T so the estimate tracks the exact softmax on uniform[-3, 3] rows.

    Stops early once the mean loss over the last ``window`` batches is at or
    below ``target_mse``. With ``strict`` a held-out MSE above ``tolerance``
    raises :class:`DidNotConverge` (the trained estimator rides along on the
    exception).
    """
    if dim < 2:
        raise InvalidSpec(f"estimator row length must be >= 2, got {dim}")
    rng = np.random.default_rng(seed)
    pool = rng.uniform(-3.0, 3.0, (pool_size, dim))
    n_held = pool_size // 10
    held, train = pool[:n_held], pool[n_held:]
    est = SoftmaxEstimator.init(dim, seed, hidden)
    for p in est.params.values():
        p.requires_grad = True
    opt = AdamW(est.params.values(), lr=lr)
    recent = deque(maxlen=window)
    history = []
    step = 0
    with blas_matmul():
        while step < steps:
            step += 1
            rows = train[rng.integers(0, len(train), batch_size)]
            opt.zero_grad()
            loss = mse_loss(estimate_softmax(Tensor(rows), est), _softmax_rows(rows))
            backward(loss)
            opt.step()
            recent.append(loss.item())
            if step % 1000 == 0:
                history.append((step, float(np.mean(recent))))
                log.debug("estimator step %d running mse %.3e", step, history[-1][1])
            if len(recent) == window and np.mean(recent) <= target_mse:
                break
    for p in est.params.values():
        p.requires_grad = False
        p.grad = None
    est.frozen = True
    report = EstimatorReport(
        dim, seed, step, estimator_mse(est, train), estimator_mse(est, held),
        converged=False, history=history,
    )
    report.converged = report.heldout_mse <= tolerance
    if strict and not report.converged:
        raise DidNotConverge(
            f"held-out MSE {report.heldout_mse:.3e} > {tolerance:.0e} after {step} steps",
            estimator=est, report=report,
        )
    return est, report
