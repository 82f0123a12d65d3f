"""Leveled-HE arithmetic contract on tensors.

Two interchangeable backends:

* SHADOW keeps plaintext float64 payloads and enforces the contract (key ids,
  levels, multiplicative depth, forbidden primitives). Results are bit-identical
  to the plaintext forward because the payload arithmetic is the same numpy
  arithmetic.
* FIXED_POINT mimics CKKS's observable arithmetic: values are integers at
  scale 2**scale_bits, every multiplication is followed by a rounding rescale
  that consumes one level, fresh encryptions carry a small keyed error term,
  and values must fit the coefficient modulus left at their level.

Neither backend is cryptographically secret. Layout changes (reshape, axis
swaps, slicing) are treated as free, as with batch-axis packing where each
tensor element is its own slot vector.
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
import math
import secrets
import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import (
    DepthExceeded, KeyMismatch, LevelMismatch, MalformedBlob, NonFiniteValue, ScaleOverflow, ShapeMismatch,
    TooManySlots, UnsupportedOp,
)
from .tensor import Tensor, current_scope, lowered_matmul, ordered_sum

DEGREES = (1024, 2048, 4096, 8192, 16384)
COEFF_BITS = (20, 30, 60)
FORBIDDEN = ("div", "exp", "tanh", "sqrt", "max", "compare")

# Enough levels for the default 2-layer model between ReLU round trips.
DEFAULT_COEFFS = (60,) + (30,) * 24 + (60,)


class Backend(IntEnum):
    SHADOW = 0
    FIXED_POINT = 1

    @classmethod
    def parse(cls, name):
        key = str(name).lower().replace("-", "").replace("_", "")
        return {"shadow": cls.SHADOW, "fixedpoint": cls.FIXED_POINT}[key]


@dataclass(frozen=True)
class HeParams:
    poly_modulus_degree: int = 8192
    coeff_modulus_bits: tuple = DEFAULT_COEFFS
    scale_bits: int = 30

    def __post_init__(self):
        object.__setattr__(self, "coeff_modulus_bits", tuple(int(b) for b in self.coeff_modulus_bits))
        if self.poly_modulus_degree not in DEGREES:
            raise ValueError(f"poly_modulus_degree must be one of {DEGREES}")
        if any(b not in COEFF_BITS for b in self.coeff_modulus_bits):
            raise ValueError(f"coeff modulus entries must come from {COEFF_BITS}")
        if len(self.coeff_modulus_bits) < 2:
            raise ValueError("need at least two coefficient moduli (level budget >= 1)")
        if not 1 <= self.scale_bits <= 60:
            raise ValueError("scale_bits must be in [1, 60]")

    @property
    def slot_count(self):
        return self.poly_modulus_degree // 2

    @property
    def level_budget(self):
        return len(self.coeff_modulus_bits) - 1

    def modulus_bits(self, level):
        """Bits of data modulus left after ``level`` rescales (special prime excluded)."""
        return sum(self.coeff_modulus_bits[: self.level_budget - level])

    @classmethod
    def for_depth(cls, depth, degree=8192, scale_bits=30):
        """Smallest 60/30.../60 chain whose level budget is ``depth``."""
        if depth < 1:
            raise ValueError("depth must be >= 1")
        return cls(degree, (60,) + (30,) * (depth - 1) + (60,), scale_bits)


@dataclass(frozen=True)
class KeyPair:
    key_id: bytes
    backend: Backend
    secret: int | None = field(default=None, repr=False)

    @classmethod
    def generate(cls, backend=Backend.SHADOW, seed=None):
        backend = Backend(backend)
        if seed is None:
            raw = secrets.token_bytes(24)
        else:
            raw = hashlib.blake2b(str(seed).encode(), digest_size=24).digest()
        secret = int.from_bytes(raw[16:], "little") if backend is Backend.FIXED_POINT else None
        return cls(raw[:16], backend, secret)


# -- ciphertext -------------------------------------------------------------------


class CipherTensor:
    """Encrypted tensor. Immutable; arithmetic goes through the module functions
    or, transparently, through :mod:`hexform.tensor` ops."""

    __slots__ = ("backend", "payload", "key_id", "params", "level", "mult_depth")

    def __init__(self, backend, payload, key_id, params, level=0, mult_depth=0):
        payload = np.asarray(payload)
        payload.flags.writeable = False
        self.backend = Backend(backend)
        self.payload = payload
        self.key_id = bytes(key_id)
        self.params = params
        self.level = int(level)
        self.mult_depth = int(mult_depth)

    @property
    def shape(self):
        return self.payload.shape

    @property
    def ndim(self):
        return self.payload.ndim

    @property
    def size(self):
        return self.payload.size

    @property
    def scale_bits(self):
        return self.params.scale_bits if self.backend is Backend.FIXED_POINT else 0

    @property
    def scale(self):
        return float(2 ** self.scale_bits)

    @property
    def pack_count(self):
        return max(1, math.ceil(self.size / self.params.slot_count))

    def __repr__(self):
        return (f"CipherTensor({self.backend.name}, shape={self.shape}, level={self.level}, "
                f"depth={self.mult_depth}, key={self.key_id.hex()[:8]})")

    def _derive(self, payload, level=None, depth=None):
        ct = CipherTensor(self.backend, payload, self.key_id, self.params,
                          self.level if level is None else level,
                          self.mult_depth if depth is None else depth)
        _note(ct)
        return ct

    def __he_op__(self, name, *args, **kwargs):
        try:
            fn = _DISPATCH[name]
        except KeyError:
            raise UnsupportedOp(name) from None
        return fn(*args, **kwargs)

    def to_bytes(self):
        return serialize(self)


# -- session accounting -----------------------------------------------------------

_SESSION = contextvars.ContextVar("hexform_he_session", default=None)


@dataclass
class DepthReport:
    max_depth: int = 0
    output_depth: int = 0
    relu_round_trips: int = 0
    level_budget: int = 0

    def as_dict(self):
        return {"max_depth": self.max_depth, "output_depth": self.output_depth,
                "relu_round_trips": self.relu_round_trips, "level_budget": self.level_budget}


class _Session:
    def __init__(self, relu_channel):
        self.relu_channel = relu_channel
        self.max_depth = 0
        self.relu_calls = 0


def _note(ct):
    sess = _SESSION.get()
    if sess is not None and ct.mult_depth > sess.max_depth:
        sess.max_depth = ct.mult_depth


@contextlib.contextmanager
def he_session(relu_channel):
    sess = _Session(relu_channel)
    token = _SESSION.set(sess)
    try:
        yield sess
    finally:
        _SESSION.reset(token)


# -- encoding ---------------------------------------------------------------------


def _plain_array(p):
    if isinstance(p, Tensor):
        return p.data
    return np.asarray(p, dtype=np.float64)


def _encode(values, scale_bits):
    scaled = np.rint(np.asarray(values, dtype=np.float64) * float(2 ** scale_bits))
    if np.abs(scaled).max(initial=0.0) >= 2.0 ** 62:
        raise ScaleOverflow("plaintext too large to encode at this scale")
    return scaled.astype(np.int64).astype(object)


def _rescale(x, scale_bits):
    half = 1 << (scale_bits - 1)
    return (x + half) >> scale_bits


def _max_bits(x):
    if x.size == 0:
        return 0
    return max(abs(int(v)).bit_length() for v in x.flat)


def _check_capacity(x, params, level):
    cap = params.modulus_bits(level) - 1
    if _max_bits(x) > cap:
        raise ScaleOverflow(f"value exceeds {cap}-bit modulus at level {level}, site {current_scope() or '<top>'}")


def _noise(key, shape, data):
    digest = hashlib.blake2b(np.ascontiguousarray(data).tobytes(), digest_size=16,
                             key=key.secret.to_bytes(8, "little")).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.integers(-1, 2, shape).astype(object)


def encrypt(x, key, params, packing=True):
    """Encrypt a plaintext tensor at level 0, depth 0."""
    arr = np.array(_plain_array(x), dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteValue("cannot encrypt non-finite values")
    if not packing and arr.ndim and max(arr.shape) > params.slot_count:
        raise TooManySlots(f"axis of length {max(arr.shape)} > {params.slot_count} slots")
    if key.backend is Backend.SHADOW:
        payload = arr
    else:
        payload = _encode(arr, params.scale_bits) + _noise(key, arr.shape, arr)
        _check_capacity(payload, params, 0)
    ct = CipherTensor(key.backend, payload, key.key_id, params)
    _note(ct)
    return ct


def decrypt(ct, key):
    if ct.key_id != key.key_id:
        raise KeyMismatch("ciphertext was not encrypted under this key")
    if ct.backend is Backend.SHADOW:
        return np.array(ct.payload, dtype=np.float64)
    return ct.payload.astype(np.float64) * 2.0 ** -ct.params.scale_bits


# -- arithmetic ---------------------------------------------------------------------


def _same_key(a, b):
    if a.key_id != b.key_id:
        raise KeyMismatch("operands encrypted under different keys")
    if a.backend is not b.backend:
        raise KeyMismatch("operands come from different backends")


def mod_switch(ct, level):
    """Drop to a lower level without touching the value (free in depth)."""
    if level < ct.level:
        raise LevelMismatch("cannot raise a ciphertext's level")
    if level == ct.level:
        return ct
    return ct._derive(ct.payload, level=level)


def _align(a, b):
    level = max(a.level, b.level)
    return mod_switch(a, level), mod_switch(b, level)


def _encode_plain(ct, p):
    arr = _plain_array(p)
    return arr if ct.backend is Backend.SHADOW else _encode(arr, ct.params.scale_bits)


def ct_add(a, b):
    _same_key(a, b)
    if a.level != b.level:
        raise LevelMismatch(f"levels {a.level} and {b.level}")
    return a._derive(a.payload + b.payload, depth=max(a.mult_depth, b.mult_depth))


def ct_add_plain(a, p):
    return a._derive(a.payload + _encode_plain(a, p))


def ct_sub(a, b):
    _same_key(a, b)
    if a.level != b.level:
        raise LevelMismatch(f"levels {a.level} and {b.level}")
    return a._derive(a.payload - b.payload, depth=max(a.mult_depth, b.mult_depth))


def ct_sub_plain(a, p, reverse=False):
    q = _encode_plain(a, p)
    return a._derive(q - a.payload if reverse else a.payload - q)


def _next_level(level, params, what):
    if level + 1 > params.level_budget:
        raise DepthExceeded(f"{what} needs level {level + 1} > budget {params.level_budget}",
                            site=current_scope() or "<top>")
    return level + 1


def _finish_product(ref, raw, level, depth):
    new_level = _next_level(level, ref.params, "multiplication")
    if ref.backend is Backend.FIXED_POINT:
        _check_capacity(raw, ref.params, level)
        raw = _rescale(raw, ref.params.scale_bits)
    ct = CipherTensor(ref.backend, raw, ref.key_id, ref.params, new_level, depth + 1)
    _note(ct)
    return ct


def ct_mul(a, b):
    _same_key(a, b)
    a, b = _align(a, b)
    return _finish_product(a, a.payload * b.payload, a.level, max(a.mult_depth, b.mult_depth))


def ct_mul_plain(a, p):
    return _finish_product(a, a.payload * _encode_plain(a, p), a.level, a.mult_depth)


def lower_matmul(a, w):
    """``a @ w`` for plaintext ``w`` as a sum of element-wise products,
    ``sum_j a[..., :, j:j+1] * w[j:j+1, :]``; costs one level whatever k is."""
    w = _plain_array(w)
    if w.ndim < 2 or a.shape[-1] != w.shape[-2]:
        raise ShapeMismatch(f"lower_matmul {a.shape} @ {w.shape}")
    return _finish_product(a, lowered_matmul(a.payload, _encode_plain(a, w)), a.level, a.mult_depth)


def ct_matmul(a, b):
    """Ciphertext-ciphertext product through broadcast element-wise multiplies
    and additions (no rotations under per-element packing)."""
    _same_key(a, b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"ct_matmul {a.shape} @ {b.shape}")
    a, b = _align(a, b)
    return _finish_product(a, lowered_matmul(a.payload, b.payload), a.level, max(a.mult_depth, b.mult_depth))


def ct_sum(a, axis=None, keepdims=False):
    return a._derive(np.asarray(ordered_sum(a.payload, axis, keepdims)))


def _delegate_relu(a):
    # ReLU is never evaluated homomorphically; the session's channel sends it to the client
    sess = _SESSION.get()
    if sess is None or sess.relu_channel is None:
        raise UnsupportedOp("relu", "no client channel")
    out = sess.relu_channel(a)
    if not isinstance(out, CipherTensor) or out.shape != a.shape:
        raise MalformedBlob("ReLU channel returned a malformed ciphertext")
    _same_key(a, out)
    sess.relu_calls += 1
    _note(out)
    return out


def _forbidden(name):
    def op(*args, **kwargs):
        raise UnsupportedOp(name)

    op.__name__ = f"ct_{name}"
    return op


ct_div = _forbidden("div")
ct_exp = _forbidden("exp")
ct_compare = _forbidden("compare")
ct_max = _forbidden("max")


# -- dispatch from tensor ops --------------------------------------------------------


def _is_ct(x):
    return isinstance(x, CipherTensor)


def _d_add(a, b):
    if _is_ct(a) and _is_ct(b):
        return ct_add(*_align(a, b))
    return ct_add_plain(a, b) if _is_ct(a) else ct_add_plain(b, a)


def _d_sub(a, b):
    if _is_ct(a) and _is_ct(b):
        return ct_sub(*_align(a, b))
    return ct_sub_plain(a, b) if _is_ct(a) else ct_sub_plain(b, a, reverse=True)


def _d_mul(a, b):
    if _is_ct(a) and _is_ct(b):
        return ct_mul(a, b)
    return ct_mul_plain(a, b) if _is_ct(a) else ct_mul_plain(b, a)


def _d_matmul(a, b):
    if _is_ct(a) and _is_ct(b):
        return ct_matmul(a, b)
    if _is_ct(a):
        return lower_matmul(a, b)
    raise UnsupportedOp("matmul", "plaintext @ ciphertext")


_DISPATCH = {
    "add": _d_add,
    "sub": _d_sub,
    "mul": _d_mul,
    "matmul": _d_matmul,
    "relu": _delegate_relu,
    "sum": ct_sum,
    "reshape": lambda a, shape: a._derive(a.payload.reshape(shape)),
    "swapaxes": lambda a, a1, a2: a._derive(np.swapaxes(a.payload, a1, a2)),
    "getitem": lambda a, idx: a._derive(np.array(a.payload[idx])),
}
for _name in FORBIDDEN:
    _DISPATCH[_name] = _forbidden(_name)


# -- model evaluation -----------------------------------------------------------------


def he_forward(model, ct, relu_channel, mask=None):
    """Run an HE-ready model on an encrypted (S, H) embedding matrix.

    ``relu_channel`` maps a ciphertext to the ciphertext of its ReLU (the
    client round trip). Returns ``(encrypted_logits, DepthReport)``.
    """
    from .workflow import he_violations

    bad = he_violations(model)
    if bad:
        prim, site = next(iter(bad.items()))
        raise UnsupportedOp(prim, site)
    with he_session(relu_channel) as sess:
        _note(ct)
        out = model(embeddings=ct, mask=mask)
    return out, DepthReport(sess.max_depth, out.mult_depth, sess.relu_calls, ct.params.level_budget)


# -- serialization -----------------------------------------------------------------------

MAGIC = b"HEXC"
BLOB_VERSION = 1
_HEADER = struct.Struct("<4sBB16sHHBI")


def serialize(ct):
    """Header, then shape (u8 ndim, u32 dims), then each pack as u32 count + values."""
    flat = ct.payload.reshape(-1)
    slots = ct.params.slot_count
    out = [
        _HEADER.pack(MAGIC, BLOB_VERSION, int(ct.backend), ct.key_id, ct.level, ct.mult_depth,
                     ct.scale_bits, ct.pack_count),
        struct.pack("<B", ct.ndim),
        struct.pack(f"<{ct.ndim}I", *ct.shape),
    ]
    for i in range(ct.pack_count):
        chunk = flat[i * slots:(i + 1) * slots]
        out.append(struct.pack("<I", len(chunk)))
        if ct.backend is Backend.SHADOW:
            out.append(np.asarray(chunk, dtype="<f8").tobytes())
        else:
            if _max_bits(chunk) > 63:
                raise ScaleOverflow("payload does not fit 64-bit wire encoding")
            out.append(np.array([int(v) for v in chunk], dtype="<i8").tobytes())
    return b"".join(out)


def deserialize(blob, params):
    try:
        magic, version, backend, key_id, level, depth, scale_bits, packs = _HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise MalformedBlob("bad magic")
        if version != BLOB_VERSION:
            raise MalformedBlob(f"unsupported blob version {version}")
        backend = Backend(backend)
        off = _HEADER.size
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        parts = []
        for _ in range(packs):
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            dtype = "<f8" if backend is Backend.SHADOW else "<i8"
            if off + 8 * n > len(blob):
                raise MalformedBlob("truncated pack")
            parts.append(np.frombuffer(blob, dtype=dtype, count=n, offset=off))
            off += 8 * n
    except (struct.error, ValueError) as exc:
        if isinstance(exc, MalformedBlob):
            raise
        raise MalformedBlob(f"cannot parse ciphertext blob: {exc}") from None
    if off != len(blob):
        raise MalformedBlob("trailing bytes after ciphertext")
    flat = np.concatenate(parts) if parts else np.zeros(0)
    if flat.size != math.prod(shape):
        raise MalformedBlob("pack sizes disagree with shape")
    if backend is Backend.SHADOW:
        payload = flat.astype(np.float64).reshape(shape)
    else:
        if scale_bits != params.scale_bits:
            raise MalformedBlob(f"blob scale 2^{scale_bits} != session scale 2^{params.scale_bits}")
        payload = np.array([int(v) for v in flat], dtype=object).reshape(shape)
    if level > params.level_budget:
        raise MalformedBlob("blob level beyond the session's budget")
    return CipherTensor(backend, payload, key_id, params, level, depth)
