"""Exact LayerNorm and its add/mul-only affine replacement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, UnsupportedOp
from .tensor import Tensor, add, div, is_cipher, mean, mul, sqrt, sub

LN_EPS = 1e-12


def ln_forward(x, gamma, beta, eps=LN_EPS):
    """(x - mean) / sqrt(var + eps) * gamma + beta over the last axis."""
    if is_cipher(x):
        raise UnsupportedOp("div")
    if x.shape[-1] < 2:
        raise ShapeMismatch("LayerNorm needs a feature dimension of at least 2")
    centered = sub(x, mean(x, axis=-1, keepdims=True))
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    return add(mul(div(centered, sqrt(add(var, eps))), gamma), beta)


@dataclass
class AffineNorm:
    """Per-feature scale and shift standing in for a LayerNorm site."""

    gamma: Tensor
    beta: Tensor

    @classmethod
    def identity(cls, size):
        return cls(Tensor(np.ones(size)), Tensor(np.zeros(size)))


def affine_norm_forward(x, p):
    if x.shape[-1] != p.gamma.shape[-1] or p.gamma.shape != p.beta.shape:
        raise ShapeMismatch(f"features {x.shape[-1]} vs affine params {p.gamma.shape}/{p.beta.shape}")
    return add(mul(x, p.gamma), p.beta)
