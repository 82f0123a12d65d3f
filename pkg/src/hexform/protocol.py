"""Two-party encrypted inference.

The client owns the key, embeds its own tokens and evaluates every ReLU; the
server owns the HE-ready model and drives the encrypted forward pass. After
the two setup messages (SESSION_INIT, EMBED_ASSETS) only ciphertext blobs and
control metadata cross the wire.

Frame layout::

    u32 LE  length of everything after this field
    u8      protocol version (0x01)
    u8      message tag
    ...     payload: u32 JSON length, JSON metadata, u16 blob count,
            then per blob a u32 length and the raw bytes
"""

from __future__ import annotations

import hashlib
import json
import logging
import queue
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import ClassVar

import numpy as np

from .data import CLS, PAD, UNK
from .errors import (
    ChannelClosed, EmptyQuery, HexformError, KeyMismatch, MalformedBlob, ProtocolVersionMismatch,
    SeqTooLong, SessionAborted, UnsupportedOp,
)
from .he import MAGIC, Backend, HeParams, KeyPair, decrypt, deserialize, encrypt, he_forward

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
_FRAME = struct.Struct("<IBB")


# -- messages ---------------------------------------------------------------------------


class Message:
    TAG: ClassVar[int] = 0

    def to_payload(self):
        """Return ``(metadata dict, list of blobs)``."""
        raise NotImplementedError

    @classmethod
    def from_payload(cls, meta, blobs):
        raise NotImplementedError

    def __eq__(self, other):
        return type(self) is type(other) and encode_payload(self) == encode_payload(other)

    __hash__ = None


@dataclass(eq=False)
class SessionInit(Message):
    TAG: ClassVar[int] = 1
    params: HeParams
    backend: Backend
    model_id: str
    version: int = PROTOCOL_VERSION

    def to_payload(self):
        p = self.params
        return {"version": self.version, "degree": p.poly_modulus_degree, "coeff_bits": list(p.coeff_modulus_bits),
                "scale_bits": p.scale_bits, "backend": Backend(self.backend).name, "model_id": self.model_id}, []

    @classmethod
    def from_payload(cls, meta, blobs):
        params = HeParams(meta["degree"], tuple(meta["coeff_bits"]), meta["scale_bits"])
        return cls(params, Backend[meta["backend"]], meta["model_id"], meta["version"])


def _array_blob(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _blob_array(b, shape):
    if len(b) != 8 * int(np.prod(shape)):
        raise MalformedBlob("table blob size disagrees with its shape")
    return np.frombuffer(b, dtype="<f8").reshape(shape).astype(np.float64)


@dataclass(eq=False)
class EmbedAssets(Message):
    """Server to client at setup: vocabulary and the two embedding tables."""

    TAG: ClassVar[int] = 2
    vocab: list
    token_table: np.ndarray
    position_table: np.ndarray
    token_level: bool = False

    def to_payload(self):
        meta = {"vocab": list(self.vocab), "token_shape": list(self.token_table.shape),
                "position_shape": list(self.position_table.shape), "token_level": self.token_level}
        return meta, [_array_blob(self.token_table), _array_blob(self.position_table)]

    @classmethod
    def from_payload(cls, meta, blobs):
        if len(blobs) != 2:
            raise MalformedBlob("EMBED_ASSETS carries exactly two tables")
        return cls(meta["vocab"], _blob_array(blobs[0], meta["token_shape"]),
                   _blob_array(blobs[1], meta["position_shape"]), bool(meta["token_level"]))


@dataclass(eq=False)
class Query(Message):
    TAG: ClassVar[int] = 3
    ciphertext: bytes
    seq_len: int
    task_kind: str = "classify"

    def to_payload(self):
        return {"seq_len": self.seq_len, "task_kind": self.task_kind}, [self.ciphertext]

    @classmethod
    def from_payload(cls, meta, blobs):
        return cls(_one_blob(blobs), int(meta["seq_len"]), meta["task_kind"])


@dataclass(eq=False)
class ReluRequest(Message):
    TAG: ClassVar[int] = 4
    request_id: int
    ciphertext: bytes

    def to_payload(self):
        return {"request_id": self.request_id}, [self.ciphertext]

    @classmethod
    def from_payload(cls, meta, blobs):
        return cls(int(meta["request_id"]), _one_blob(blobs))


@dataclass(eq=False)
class ReluResponse(ReluRequest):
    TAG: ClassVar[int] = 5


@dataclass(eq=False)
class Result(Message):
    TAG: ClassVar[int] = 6
    ciphertext: bytes
    depth: dict = field(default_factory=dict)

    def to_payload(self):
        return {"depth": {k: int(v) for k, v in self.depth.items()}}, [self.ciphertext]

    @classmethod
    def from_payload(cls, meta, blobs):
        return cls(_one_blob(blobs), dict(meta["depth"]))


@dataclass(eq=False)
class Error(Message):
    TAG: ClassVar[int] = 7
    code: str
    detail: str = ""

    def to_payload(self):
        return {"code": self.code, "detail": self.detail}, []

    @classmethod
    def from_payload(cls, meta, blobs):
        return cls(meta["code"], meta["detail"])


MESSAGE_TYPES = {m.TAG: m for m in (SessionInit, EmbedAssets, Query, ReluRequest, ReluResponse, Result, Error)}


def _one_blob(blobs):
    if len(blobs) != 1:
        raise MalformedBlob(f"expected one ciphertext blob, got {len(blobs)}")
    return blobs[0]


def encode_payload(msg):
    meta, blobs = msg.to_payload()
    js = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [struct.pack("<I", len(js)), js, struct.pack("<H", len(blobs))]
    for b in blobs:
        parts += [struct.pack("<I", len(b)), bytes(b)]
    return b"".join(parts)


def _decode_payload(buf):
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise MalformedBlob("truncated payload")
        out = buf[off:off + n]
        off += n
        return out

    (jl,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(jl).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedBlob(f"bad metadata: {exc}") from None
    (count,) = struct.unpack("<H", take(2))
    blobs = []
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        blobs.append(bytes(take(n)))
    if off != len(buf):
        raise MalformedBlob("trailing bytes in payload")
    if not isinstance(meta, dict):
        raise MalformedBlob("metadata must be an object")
    return meta, blobs


def frame_encode(msg, version=PROTOCOL_VERSION):
    payload = encode_payload(msg)
    return _FRAME.pack(len(payload) + 2, version, msg.TAG) + payload


def frame_decode(frame):
    frame = bytes(frame)
    if len(frame) < _FRAME.size:
        raise MalformedBlob("frame shorter than its header")
    length, version, tag = _FRAME.unpack_from(frame)
    if length != len(frame) - 4:
        raise MalformedBlob(f"frame length field {length} != {len(frame) - 4} bytes present")
    if version != PROTOCOL_VERSION:
        raise ProtocolVersionMismatch(f"peer speaks version {version}, expected {PROTOCOL_VERSION}")
    cls = MESSAGE_TYPES.get(tag)
    if cls is None:
        raise MalformedBlob(f"unknown message tag {tag}")
    meta, blobs = _decode_payload(frame[_FRAME.size:])
    try:
        return cls.from_payload(meta, blobs)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedBlob(f"bad {cls.__name__} payload: {exc}") from None


# -- transports ---------------------------------------------------------------------------


class Transport:
    """Ordered, reliable delivery of whole frames."""

    def send_frame(self, frame):
        raise NotImplementedError

    def recv_frame(self):
        raise NotImplementedError

    def close(self):
        pass

    def send(self, msg):
        self.send_frame(frame_encode(msg))

    def recv(self):
        return frame_decode(self.recv_frame())


_CLOSED = object()


class InProcessTransport(Transport):
    def __init__(self, inbox, outbox, timeout=None):
        self._in, self._out, self._timeout = inbox, outbox, timeout
        self._closed = False

    @classmethod
    def pair(cls, timeout=None):
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b, timeout), cls(b, a, timeout)

    def send_frame(self, frame):
        if self._closed:
            raise ChannelClosed("transport closed")
        self._out.put(bytes(frame))

    def recv_frame(self):
        if self._closed:
            raise ChannelClosed("transport closed")
        try:
            item = self._in.get(timeout=self._timeout)
        except queue.Empty:
            raise ChannelClosed("timed out waiting for peer") from None
        if item is _CLOSED:
            self._closed = True
            raise ChannelClosed("peer closed the channel")
        return item

    def close(self):
        if not self._closed:
            self._closed = True
            self._out.put(_CLOSED)


class StreamTransport(Transport):
    """Frames over a connected socket (TCP or a local socket pair)."""

    def __init__(self, sock):
        self.sock = sock

    @classmethod
    def pair(cls):
        a, b = socket.socketpair()
        return cls(a), cls(b)

    @classmethod
    def connect(cls, host, port, timeout=None):
        return cls(socket.create_connection((host, port), timeout=timeout))

    def send_frame(self, frame):
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise ChannelClosed(f"send failed: {exc}") from None

    def _exact(self, n):
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except OSError as exc:
                raise ChannelClosed(f"recv failed: {exc}") from None
            if not chunk:
                raise ChannelClosed("peer closed the stream")
            buf += chunk
        return bytes(buf)

    def recv_frame(self):
        head = self._exact(4)
        (length,) = struct.unpack("<I", head)
        return head + self._exact(length)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class RecordingTransport(Transport):
    """Pass-through proxy that keeps every frame with its direction."""

    def __init__(self, inner, log_list=None):
        self.inner = inner
        self.frames = [] if log_list is None else log_list

    def send_frame(self, frame):
        self.frames.append(("out", bytes(frame)))
        self.inner.send_frame(frame)

    def recv_frame(self):
        frame = self.inner.recv_frame()
        self.frames.append(("in", bytes(frame)))
        return frame

    def close(self):
        self.inner.close()


# -- leakage audit ------------------------------------------------------------------------

_SETUP_TAGS = {SessionInit.TAG, EmbedAssets.TAG}
# metadata each post-setup message may carry, and the JSON types allowed
_CONTROL_FIELDS = {
    Query.TAG: {"seq_len": int, "task_kind": str},
    ReluRequest.TAG: {"request_id": int},
    ReluResponse.TAG: {"request_id": int},
    Result.TAG: {"depth": dict},
    Error.TAG: {"code": str, "detail": str},
}


def audit_transcript(frames, secrets=()):
    """Structural leakage check over recorded frames.

    Once setup is over, each message may only carry ciphertext blobs (HEXC
    header) and whitelisted scalar control fields. Returns the violations
    found (empty means clean). ``secrets`` are byte strings that must not
    appear in any frame.
    """
    problems = []
    setup_over = False
    for i, item in enumerate(frames):
        frame = item[1] if isinstance(item, tuple) else item
        for s in secrets:
            if s and s in frame:
                problems.append(f"frame {i}: secret material on the wire")
        _, _, tag = _FRAME.unpack_from(frame)
        if tag in _SETUP_TAGS:
            if setup_over:
                problems.append(f"frame {i}: setup message after setup")
            continue
        setup_over = True
        meta, blobs = _decode_payload(frame[_FRAME.size:])
        allowed = _CONTROL_FIELDS.get(tag, {})
        for key, value in meta.items():
            kind = allowed.get(key)
            if kind is None:
                problems.append(f"frame {i}: unexpected field {key!r}")
            elif kind is dict:
                if not isinstance(value, dict) or not all(isinstance(v, int) for v in value.values()):
                    problems.append(f"frame {i}: {key!r} must map names to integers")
            elif not isinstance(value, kind) or isinstance(value, bool):
                problems.append(f"frame {i}: field {key!r} has type {type(value).__name__}")
        for b in blobs:
            if not b.startswith(MAGIC):
                problems.append(f"frame {i}: blob is not a ciphertext")
    return problems


# -- server ---------------------------------------------------------------------------------


class SessionState(str, Enum):
    AWAIT_QUERY = "await-query"
    FORWARDING = "forwarding"
    AWAIT_RELU = "await-relu"
    DONE = "done"
    FAILED = "failed"


_LEGAL = {
    SessionState.AWAIT_QUERY: {SessionState.FORWARDING},
    SessionState.FORWARDING: {SessionState.AWAIT_RELU, SessionState.DONE},
    SessionState.AWAIT_RELU: {SessionState.FORWARDING},
}


def model_id(model):
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].data).tobytes())
    return h.hexdigest()[:16]


class ServerSession:
    """One query's worth of server-side state. Holds no key material."""

    def __init__(self, model, params, backend, transport):
        self.model = model
        self.params = params
        self.backend = Backend(backend)
        self.transport = transport
        self.state = SessionState.AWAIT_QUERY
        self.pending = None
        self.history = [self.state]
        self.report = None
        self._next_id = 0

    def _move(self, new):
        if new is not SessionState.FAILED and new not in _LEGAL.get(self.state, ()):
            raise SessionAborted(f"illegal transition {self.state.value} -> {new.value}", "illegal-transition")
        self.state = new
        self.history.append(new)

    def handshake(self):
        cfg = self.model.config
        self.transport.send(SessionInit(self.params, self.backend, model_id(self.model)))
        self.transport.send(EmbedAssets(
            list(self.model.vocab or []), self.model.params["embed.token"].data,
            self.model.params["embed.position"].data, cfg.token_level,
        ))

    def _relu_channel(self, ct):
        self._move(SessionState.AWAIT_RELU)
        rid = self._next_id
        self._next_id += 1
        self.pending = rid
        self.transport.send(ReluRequest(rid, ct.to_bytes()))
        reply = self.transport.recv()
        if isinstance(reply, Error):
            raise SessionAborted(f"client error {reply.code}: {reply.detail}", reply.code)
        if not isinstance(reply, ReluResponse) or reply.request_id != rid:
            raise SessionAborted("ReLU response does not answer the pending request", "bad-response")
        self.pending = None
        out = deserialize(reply.ciphertext, self.params)
        if out.key_id != ct.key_id:
            raise KeyMismatch("ReLU response under a different key")
        self._move(SessionState.FORWARDING)
        return out

    def run(self):
        """Serve exactly one query. Returns the final state."""
        try:
            self.handshake()
            msg = self.transport.recv()
            if not isinstance(msg, Query):
                raise SessionAborted(f"expected QUERY, got {type(msg).__name__}", "unexpected-message")
            self._move(SessionState.FORWARDING)
            ct = deserialize(msg.ciphertext, self.params)
            if ct.backend is not self.backend:
                raise KeyMismatch("query encrypted for another backend")
            S = self.model.config.max_seq_len
            if ct.shape != (S, self.model.config.hidden_size) or not 1 <= msg.seq_len <= S:
                raise MalformedBlob(f"query shape {ct.shape} / seq_len {msg.seq_len} do not fit the model")
            mask = np.arange(S) >= msg.seq_len
            out, report = he_forward(self.model, ct, self._relu_channel, mask)
            self.report = report
            self._move(SessionState.DONE)
            self.transport.send(Result(out.to_bytes(), report.as_dict()))
        except ChannelClosed as exc:
            log.warning("session aborted: %s", exc)
            self._move(SessionState.FAILED)
        except HexformError as exc:
            self._move(SessionState.FAILED)
            try:
                self.transport.send(Error(type(exc).__name__, str(exc)))
            except ChannelClosed:
                pass
        return self.state


class InferenceServer:
    """Hosts sessions for one HE-ready model; each session gets its own state."""

    def __init__(self, model, params=None, backend=Backend.SHADOW):
        from .workflow import he_violations

        bad = he_violations(model)
        if bad:
            prim, site = next(iter(bad.items()))
            raise UnsupportedOp(prim, site)
        self.model = model
        self.params = params or HeParams()
        self.backend = Backend(backend)

    def session(self, transport):
        return ServerSession(self.model, self.params, self.backend, transport)

    def handle(self, transport):
        try:
            return self.session(transport).run()
        finally:
            transport.close()

    def serve_tcp(self, host="127.0.0.1", port=0, ready=None):
        """Blocking TCP server, one thread per connection. ``ready`` gets the bound port."""
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                outer.handle(StreamTransport(self.request))

        class Server(socketserver.ThreadingMixIn, socketserver.TCPServer):
            daemon_threads = True
            allow_reuse_address = True

        with Server((host, port), Handler) as srv:
            self.tcp = srv
            if ready is not None:
                ready(srv.server_address[1])
            srv.serve_forever()


# -- client -----------------------------------------------------------------------------------


class ClientSession:
    """Key holder: embeds, encrypts, answers ReLU requests, decrypts the result."""

    def __init__(self, transport, seed=None):
        self.transport = transport
        self.seed = seed
        self.key = None
        self.params = None
        self.assets = None
        self.relu_requests = 0

    def connect(self):
        init = self.transport.recv()
        if not isinstance(init, SessionInit):
            raise SessionAborted("expected SESSION_INIT first", "unexpected-message")
        if init.version != PROTOCOL_VERSION:
            raise ProtocolVersionMismatch(f"server offers version {init.version}")
        assets = self.transport.recv()
        if not isinstance(assets, EmbedAssets):
            raise SessionAborted("expected EMBED_ASSETS", "unexpected-message")
        self.params, self.assets = init.params, assets
        self.key = KeyPair.generate(init.backend, self.seed)
        return init

    @property
    def max_seq_len(self):
        return self.assets.position_table.shape[0]

    def tokenize(self, text):
        index = {w: i for i, w in enumerate(self.assets.vocab)}
        words = text.split() if isinstance(text, str) else list(text)
        if not words:
            raise EmptyQuery("query has no tokens")
        ids = [CLS] + [w if isinstance(w, (int, np.integer)) else index.get(w, UNK) for w in words]
        if len(ids) > self.max_seq_len:
            raise SeqTooLong(f"{len(ids)} tokens > {self.max_seq_len}")
        return ids

    def client_embed(self, text):
        """Token + position lookup on the client, padded to the model length.

        Returns ``(embeddings, seq_len, token_ids)``.
        """
        ids = self.tokenize(text)
        padded = np.full(self.max_seq_len, PAD, dtype=np.int64)
        padded[:len(ids)] = ids
        if padded.max() >= len(self.assets.token_table):
            raise SeqTooLong("token id beyond the embedding table")
        emb = self.assets.token_table[padded] + self.assets.position_table[np.arange(self.max_seq_len)]
        return emb, len(ids), padded

    def client_relu_service(self, req):
        ct = deserialize(req.ciphertext, self.params)
        x = decrypt(ct, self.key)
        self.relu_requests += 1
        return ReluResponse(req.request_id, encrypt(np.maximum(x, 0.0), self.key, self.params).to_bytes())

    def query(self, text, task_kind="classify"):
        """Run one encrypted query. Returns ``(logits, depth report dict)``."""
        emb, n, _ = self.client_embed(text)
        self.transport.send(Query(encrypt(emb, self.key, self.params).to_bytes(), n, task_kind))
        while True:
            msg = self.transport.recv()
            if isinstance(msg, ReluRequest) and not isinstance(msg, ReluResponse):
                try:
                    reply = self.client_relu_service(msg)
                except HexformError as exc:
                    self.transport.send(Error(type(exc).__name__, str(exc)))
                    raise
                self.transport.send(reply)
            elif isinstance(msg, Result):
                logits = decrypt(deserialize(msg.ciphertext, self.params), self.key)
                if not self.assets.token_level:
                    logits = logits.reshape(-1)
                return logits, msg.depth
            elif isinstance(msg, Error):
                raise SessionAborted(f"server error {msg.code}: {msg.detail}", msg.code)
            else:
                raise SessionAborted(f"unexpected {type(msg).__name__}", "unexpected-message")


@dataclass
class SessionOutcome:
    logits: np.ndarray
    depth: dict
    server_state: SessionState
    transcript: list
    key: KeyPair


def run_session(server, text, transport="inprocess", seed=None, timeout=60.0):
    """Full client/server exchange for one query, both parties in this process.

    ``transport`` is ``"inprocess"`` (queues) or ``"stream"`` (socket pair).
    The server side is wrapped in a recording proxy.
    """
    if transport == "inprocess":
        s_end, c_end = InProcessTransport.pair(timeout)
    elif transport == "stream":
        s_end, c_end = StreamTransport.pair()
        s_end.sock.settimeout(timeout)
        c_end.sock.settimeout(timeout)
    else:
        raise ValueError(f"unknown transport {transport!r}")
    rec = RecordingTransport(s_end)
    session = server.session(rec)
    worker = threading.Thread(target=session.run, daemon=True)
    worker.start()
    client = ClientSession(c_end, seed)
    try:
        client.connect()
        logits, depth = client.query(text)
    finally:
        worker.join(timeout)
        c_end.close()
        rec.close()
    return SessionOutcome(logits, depth, session.state, rec.frames, client.key)
