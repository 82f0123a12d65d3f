"""Small post-LN transformer encoder with swappable non-polynomial parts.

Activation, softmax and normalization each switch between the exact op and
its add/mul/ReLU stand-in through :class:`ModelConfig`. The forward pass is
written only in terms of :mod:`hexform.tensor` ops, so the same code runs on
plaintext tensors and on ciphertext.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidSpec, MissingAffineNorm, NonFiniteMaskValue, SeqTooLong, VocabOverflow
from .estimator import SoftmaxEstimator, estimate_softmax
from .norms import LN_EPS, AffineNorm, affine_norm_forward, ln_forward
from .tensor import (
    Tensor, add, gelu, getitem, matmul, mul, relu, reshape, scope, softmax_exact, swapaxes, take_rows,
)


class ActivationMode(str, Enum):
    GELU = "gelu"
    RELU = "relu"


class SoftmaxMode(str, Enum):
    EXACT = "exact"
    ESTIMATED = "estimated"


class NormMode(str, Enum):
    LAYERNORM = "layernorm"
    AFFINE = "affine"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    max_seq_len: int = 16
    num_layers: int = 2
    hidden_size: int = 128
    num_heads: int = 2
    ffn_size: int = 512
    num_labels: int = 2
    token_level: bool = False
    activation_mode: ActivationMode = ActivationMode.GELU
    softmax_mode: SoftmaxMode = SoftmaxMode.EXACT
    norm_mode: NormMode = NormMode.LAYERNORM
    mask_value: float = -3.0
    scale_absorbed: bool = False
    ln_eps: float = LN_EPS

    def __post_init__(self):
        for name in ("vocab_size", "max_seq_len", "num_layers", "hidden_size", "num_heads", "ffn_size", "num_labels"):
            if getattr(self, name) < 1:
                raise InvalidSpec(f"{name} must be positive")
        if self.hidden_size % self.num_heads:
            raise InvalidSpec("hidden_size must be divisible by num_heads")
        if not math.isfinite(self.mask_value):
            raise NonFiniteMaskValue(f"mask_value must be finite, got {self.mask_value}")
        # accept plain strings, e.g. from a manifest
        object.__setattr__(self, "activation_mode", ActivationMode(self.activation_mode))
        object.__setattr__(self, "softmax_mode", SoftmaxMode(self.softmax_mode))
        object.__setattr__(self, "norm_mode", NormMode(self.norm_mode))

    @property
    def head_dim(self):
        return self.hidden_size // self.num_heads

    def norm_sites(self):
        sites = ["embed"]
        for i in range(self.num_layers):
            sites += [f"layers.{i}.attn", f"layers.{i}.ffn"]
        return sites

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def apply_mask(scores, mask, mask_value):
    """Add ``mask_value`` to scores at masked (True) key positions."""
    if not math.isfinite(mask_value):
        raise NonFiniteMaskValue(f"mask_value must be finite, got {mask_value}")
    if mask is None:
        return scores
    return add(scores, np.where(np.asarray(mask, dtype=bool), float(mask_value), 0.0))


def _linear(x, params, prefix):
    return add(matmul(x, params[prefix + ".weight"]), params[prefix + ".bias"])


class TransformerModel:
    """Parameters live in ``params`` (name -> Tensor); ``estimator`` is the
    softmax stand-in used when ``config.softmax_mode`` is ESTIMATED. ``vocab``
    (id -> token string) is carried along for serving."""

    def __init__(self, config, params, estimator=None, vocab=None):
        self.config = config
        self.params = dict(params)
        self.estimator = estimator
        self.vocab = list(vocab) if vocab is not None else None

    @classmethod
    def init(cls, config, seed=0):
        rng = np.random.default_rng(seed)
        H, F = config.hidden_size, config.ffn_size

        def normal(*shape):
            return Tensor(rng.normal(0.0, 0.02, shape))

        p = {
            "embed.token": normal(config.vocab_size, H),
            "embed.position": normal(config.max_seq_len, H),
        }
        for i in range(config.num_layers):
            for name in "qkvo":
                p[f"layers.{i}.attn.{name}.weight"] = normal(H, H)
                p[f"layers.{i}.attn.{name}.bias"] = Tensor(np.zeros(H))
            p[f"layers.{i}.ffn.in.weight"] = normal(H, F)
            p[f"layers.{i}.ffn.in.bias"] = Tensor(np.zeros(F))
            p[f"layers.{i}.ffn.out.weight"] = normal(F, H)
            p[f"layers.{i}.ffn.out.bias"] = Tensor(np.zeros(H))
        for site in config.norm_sites():
            p[f"{site}.ln.gamma"] = Tensor(np.ones(H))
            p[f"{site}.ln.beta"] = Tensor(np.zeros(H))
        p["head.weight"] = normal(H, config.num_labels)
        p["head.bias"] = Tensor(np.zeros(config.num_labels))
        model = cls(config, p)
        if config.softmax_mode is SoftmaxMode.ESTIMATED:
            model.estimator = SoftmaxEstimator.init(config.max_seq_len, seed)
        return model

    # -- bookkeeping -----------------------------------------------------------

    def copy(self, **config_changes):
        params = {k: Tensor(v.data) for k, v in self.params.items()}
        est = self.estimator.copy() if self.estimator is not None else None
        return TransformerModel(self.config.replace(**config_changes), params, est, self.vocab)

    def parameters(self):
        """All trainable tensors, estimator included under ``estimator.*``."""
        out = dict(self.params)
        if self.estimator is not None:
            out.update({f"estimator.{k}": v for k, v in self.estimator.params.items()})
        return out

    def has_exact_ln(self):
        return all(f"{s}.ln.gamma" in self.params for s in self.config.norm_sites())

    def has_affine(self):
        return all(f"{s}.affine.gamma" in self.params for s in self.config.norm_sites())

    def affine(self, site):
        try:
            return AffineNorm(self.params[f"{site}.affine.gamma"], self.params[f"{site}.affine.beta"])
        except KeyError:
            raise MissingAffineNorm(f"no affine norm at {site}") from None

    def absorb_scale(self):
        """Fold 1/sqrt(head_dim) into the query projection."""
        if self.config.scale_absorbed:
            return self.copy()
        out = self.copy(scale_absorbed=True)
        c = 1.0 / math.sqrt(self.config.head_dim)
        for i in range(self.config.num_layers):
            for part in ("weight", "bias"):
                key = f"layers.{i}.attn.q.{part}"
                out.params[key] = Tensor(self.params[key].data * c)
        return out

    # -- forward ---------------------------------------------------------------

    def embed(self, tokens):
        ids = np.asarray(tokens, dtype=np.int64)
        S = ids.shape[-1]
        if S > self.config.max_seq_len:
            raise SeqTooLong(f"{S} tokens > max_seq_len {self.config.max_seq_len}")
        if ids.size and (ids.max() >= self.config.vocab_size or ids.min() < 0):
            raise VocabOverflow(f"token id outside [0, {self.config.vocab_size})")
        return add(take_rows(self.params["embed.token"], ids),
                   take_rows(self.params["embed.position"], np.arange(S)))

    def _norm(self, site, x, capture):
        if capture is not None:
            capture[site] = x
        with scope(f"{site}.norm"):
            if self.config.norm_mode is NormMode.AFFINE:
                return affine_norm_forward(x, self.affine(site))
            if f"{site}.ln.gamma" not in self.params:
                raise InvalidSpec(f"exact LayerNorm at {site} has been dropped")
            return ln_forward(x, self.params[f"{site}.ln.gamma"], self.params[f"{site}.ln.beta"], self.config.ln_eps)

    def attention_forward(self, layer, x, mask=None):
        """Multi-head self-attention for one layer. ``mask``: (..., S) bool, True = padding."""
        cfg, p = self.config, self.params
        S, H, nh, dh = x.shape[-2], cfg.hidden_size, cfg.num_heads, cfg.head_dim
        if S > cfg.max_seq_len:
            raise SeqTooLong(f"{S} positions > max_seq_len {cfg.max_seq_len}")
        lead = tuple(x.shape[:-2])
        pre = f"layers.{layer}.attn"

        def heads(t):
            return swapaxes(reshape(t, lead + (S, nh, dh)), -2, -3)

        with scope(pre):
            q = heads(_linear(x, p, pre + ".q"))
            k = heads(_linear(x, p, pre + ".k"))
            v = heads(_linear(x, p, pre + ".v"))
            scores = matmul(q, swapaxes(k, -1, -2))
            if not cfg.scale_absorbed:
                scores = mul(scores, 1.0 / math.sqrt(dh))
            if mask is not None:
                key_mask = np.asarray(mask, dtype=bool)
                key_mask = key_mask.reshape(key_mask.shape[:-1] + (1, 1, key_mask.shape[-1]))
                scores = apply_mask(scores, key_mask, cfg.mask_value)
            with scope("softmax"):
                if cfg.softmax_mode is SoftmaxMode.ESTIMATED:
                    probs = estimate_softmax(scores, self.estimator)
                else:
                    probs = softmax_exact(scores)
            ctx = reshape(swapaxes(matmul(probs, v), -2, -3), lead + (S, H))
            return _linear(ctx, p, pre + ".o")

    def _ffn(self, layer, x):
        pre = f"layers.{layer}.ffn"
        with scope(pre):
            h = _linear(x, self.params, pre + ".in")
            h = relu(h) if self.config.activation_mode is ActivationMode.RELU else gelu(h)
            return _linear(h, self.params, pre + ".out")

    def forward(self, tokens=None, *, embeddings=None, mask=None, capture=None):
        """Task logits: (..., num_labels) or, for token-level heads, (..., S, num_labels).

        Either ``tokens`` or pre-computed ``embeddings`` (token + position,
        shape (..., S, H)) must be given. ``capture``, if a dict, receives the
        input to every norm site.
        """
        cfg = self.config
        if cfg.softmax_mode is SoftmaxMode.ESTIMATED and self.estimator is None:
            raise InvalidSpec("estimated softmax needs an estimator")
        if embeddings is None:
            embeddings = self.embed(tokens)
        S = embeddings.shape[-2]
        if S > cfg.max_seq_len:
            raise SeqTooLong(f"{S} positions > max_seq_len {cfg.max_seq_len}")
        h = self._norm("embed", embeddings, capture)
        for i in range(cfg.num_layers):
            h = self._norm(f"layers.{i}.attn", add(h, self.attention_forward(i, h, mask)), capture)
            h = self._norm(f"layers.{i}.ffn", add(h, self._ffn(i, h)), capture)
        with scope("head"):
            if cfg.token_level:
                return _linear(h, self.params, "head")
            first = getitem(h, (Ellipsis, slice(0, 1), slice(None)))
            logits = _linear(first, self.params, "head")
            return reshape(logits, tuple(logits.shape[:-2]) + (cfg.num_labels,))

    __call__ = forward
