"""Binary framing for client/server traffic and per-iteration traffic accounting.

Frame layout (all integers unsigned little-endian)::

    magic 'S' 'F' | version u8 (=1) | msg_type u8 | payload_len u32 | payload

Payloads:

* sparse tensor messages (types 1, 2):
  ``round u32 | client u32 | rank u8 | dims u32*rank | count u32 | indices u32*count | values f32*count``
* dense tensor messages (types 3, 4):
  ``round u32 | client u32 | rank u8 | dims u32*rank | values f32*numel``
* model sync (type 5):
  ``direction u8 | round u32 | client u32 | n_params u32 | n_buffers u32 | values f32*(n_params+n_buffers)``
* control (type 6): ``code u8``
"""
from __future__ import annotations

import enum
import math
import struct
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from splitfed.sparse import SparseCutTensor, kept_count

MAGIC = b"SF"
VERSION = 1
MAX_RANK = 8
HEADER = struct.Struct("<2sBBI")
HEADER_LEN = HEADER.size  # 8
ROUTE = struct.Struct("<II")  # round, client_id
SYNC_HEAD = struct.Struct("<BIIII")
U32_MAX = 0xFFFFFFFF


class MsgType(enum.IntEnum):
    FORWARD_ACTIVATION = 1
    ACTIVATION_GRADIENT = 2
    DENSE_ACTIVATION = 3
    DENSE_GRADIENT = 4
    MODEL_SYNC = 5
    CONTROL = 6


class ProtocolError(ValueError):
    code = "protocol"


class BadMagic(ProtocolError):
    code = "bad_magic"


class UnsupportedVersion(ProtocolError):
    code = "unsupported_version"


class Truncated(ProtocolError):
    code = "truncated"


class IndexOutOfBounds(ProtocolError):
    code = "index_out_of_bounds"


class MalformedPayload(ProtocolError):
    code = "malformed_payload"


@dataclass(eq=False)
class SparseMessage:
    """``ForwardActivation`` (a¹ upload) or ``ActivationGradient`` (da¹ download)."""

    kind: MsgType
    round: int
    client_id: int
    tensor: SparseCutTensor

    def __eq__(self, other):
        return (
            isinstance(other, SparseMessage)
            and (self.kind, self.round, self.client_id) == (other.kind, other.round, other.client_id)
            and self.tensor == other.tensor
        )


@dataclass(eq=False)
class DenseMessage:
    """Uncompressed activation or gradient, as exchanged by plain split learning."""

    kind: MsgType
    round: int
    client_id: int
    tensor: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, DenseMessage)
            and (self.kind, self.round, self.client_id) == (other.kind, other.round, other.client_id)
            and self.tensor.shape == other.tensor.shape
            and np.asarray(self.tensor, np.float32).tobytes() == np.asarray(other.tensor, np.float32).tobytes()
        )


@dataclass(eq=False)
class ModelSync:
    """Full model transfer for federated averaging; ``direction`` is ``"up"`` or ``"down"``."""

    direction: str
    round: int
    client_id: int
    params: np.ndarray  # flat trainable values
    buffers: np.ndarray  # flat running statistics

    def __eq__(self, other):
        return (
            isinstance(other, ModelSync)
            and (self.direction, self.round, self.client_id) == (other.direction, other.round, other.client_id)
            and np.asarray(self.params, np.float32).tobytes() == np.asarray(other.params, np.float32).tobytes()
            and np.asarray(self.buffers, np.float32).tobytes() == np.asarray(other.buffers, np.float32).tobytes()
        )


@dataclass(frozen=True)
class Control:
    code: int


def ForwardActivation(round, client_id, tensor):
    return SparseMessage(MsgType.FORWARD_ACTIVATION, round, client_id, tensor)


def ActivationGradient(round, client_id, tensor):
    return SparseMessage(MsgType.ACTIVATION_GRADIENT, round, client_id, tensor)


def DenseActivation(round, client_id, tensor):
    return DenseMessage(MsgType.DENSE_ACTIVATION, round, client_id, np.asarray(tensor, np.float32))


def DenseGradient(round, client_id, tensor):
    return DenseMessage(MsgType.DENSE_GRADIENT, round, client_id, np.asarray(tensor, np.float32))


def _u32(name, v):
    if not 0 <= int(v) <= U32_MAX:
        raise ProtocolError(f"{name}={v} does not fit in u32")
    return int(v)


def _shape_bytes(shape):
    if not 1 <= len(shape) <= MAX_RANK:
        raise ProtocolError(f"tensor rank {len(shape)} outside [1, {MAX_RANK}]")
    if any(d < 1 for d in shape):
        raise ProtocolError(f"tensor dimensions must be positive: {shape}")
    return struct.pack(f"<B{len(shape)}I", len(shape), *(_u32("dim", d) for d in shape))


def _f32(values):
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def _payload(msg):
    if isinstance(msg, SparseMessage):
        if msg.kind not in (MsgType.FORWARD_ACTIVATION, MsgType.ACTIVATION_GRADIENT):
            raise ProtocolError(f"sparse message with non-sparse type {msg.kind!r}")
        s = msg.tensor
        try:
            s.validate()
        except (ValueError, IndexError) as exc:
            raise ProtocolError(f"invalid sparse tensor: {exc}") from None
        return msg.kind, b"".join([
            ROUTE.pack(_u32("round", msg.round), _u32("client_id", msg.client_id)),
            _shape_bytes(s.shape),
            struct.pack("<I", s.count),
            np.ascontiguousarray(s.indices, dtype="<u4").tobytes(),
            _f32(s.values),
        ])
    if isinstance(msg, DenseMessage):
        if msg.kind not in (MsgType.DENSE_ACTIVATION, MsgType.DENSE_GRADIENT):
            raise ProtocolError(f"dense message with non-dense type {msg.kind!r}")
        t = np.asarray(msg.tensor)
        return msg.kind, ROUTE.pack(_u32("round", msg.round), _u32("client_id", msg.client_id)) + _shape_bytes(t.shape) + _f32(t.reshape(-1))
    if isinstance(msg, ModelSync):
        if msg.direction not in ("up", "down"):
            raise ProtocolError(f"sync direction must be 'up' or 'down', got {msg.direction!r}")
        head = SYNC_HEAD.pack(
            0 if msg.direction == "up" else 1, _u32("round", msg.round), _u32("client_id", msg.client_id),
            _u32("n_params", np.size(msg.params)), _u32("n_buffers", np.size(msg.buffers)),
        )
        return MsgType.MODEL_SYNC, head + _f32(np.ravel(msg.params)) + _f32(np.ravel(msg.buffers))
    if isinstance(msg, Control):
        if not 0 <= msg.code <= 0xFF:
            raise ProtocolError(f"control code {msg.code} does not fit in u8")
        return MsgType.CONTROL, bytes([msg.code])
    raise ProtocolError(f"cannot encode {type(msg).__name__}")


def encode(msg) -> bytes:
    kind, payload = _payload(msg)
    return HEADER.pack(MAGIC, VERSION, int(kind), len(payload)) + payload


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise Truncated(f"payload ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st):
        return st.unpack(self.take(st.size))

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def f32(self, n):
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32)

    def shape(self):
        rank = self.take(1)[0]
        if not 1 <= rank <= MAX_RANK:
            raise MalformedPayload(f"tensor rank {rank} outside [1, {MAX_RANK}]")
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        if any(d == 0 for d in dims):
            raise MalformedPayload(f"zero tensor dimension in {dims}")
        return dims

    def done(self):
        if self.pos != len(self.buf):
            raise MalformedPayload(f"{len(self.buf) - self.pos} trailing payload bytes")


def decode(data: bytes):
    """Inverse of :func:`encode`. Raises a :class:`ProtocolError` subclass on bad input."""
    data = bytes(data)
    if len(data) < HEADER_LEN:
        if data[:2] != MAGIC[: len(data[:2])]:
            raise BadMagic(f"bad magic {data[:2]!r}")
        raise Truncated(f"frame of {len(data)} bytes is shorter than the {HEADER_LEN}-byte header")
    magic, version, kind, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported version {version}")
    body = data[HEADER_LEN:]
    if len(body) < length:
        raise Truncated(f"payload has {len(body)} of {length} declared bytes")
    if len(body) > length:
        raise MalformedPayload(f"{len(body) - length} bytes after declared payload")
    r = _Reader(body)
    if kind in (MsgType.FORWARD_ACTIVATION, MsgType.ACTIVATION_GRADIENT):
        rnd, cid = r.unpack(ROUTE)
        shape = r.shape()
        count = r.u32()
        numel = math.prod(shape)
        if count > numel:
            raise MalformedPayload(f"{count} entries exceed tensor size {numel}")
        idx = np.frombuffer(r.take(4 * count), dtype="<u4").astype(np.uint32)
        vals = r.f32(count)
        r.done()
        if count:
            if int(idx.max()) >= numel:
                raise IndexOutOfBounds(f"index {int(idx.max())} out of bounds for size {numel}")
            if np.any(np.diff(idx.astype(np.int64)) <= 0):
                raise MalformedPayload("indices not strictly increasing")
        return SparseMessage(MsgType(kind), rnd, cid, SparseCutTensor(shape, idx, vals))
    if kind in (MsgType.DENSE_ACTIVATION, MsgType.DENSE_GRADIENT):
        rnd, cid = r.unpack(ROUTE)
        shape = r.shape()
        numel = math.prod(shape)
        if 4 * numel > len(body):
            raise Truncated(f"dense tensor of {numel} values does not fit in payload")
        vals = r.f32(numel)
        r.done()
        return DenseMessage(MsgType(kind), rnd, cid, vals.reshape(shape))
    if kind == MsgType.MODEL_SYNC:
        direction, rnd, cid, n_params, n_buffers = r.unpack(SYNC_HEAD)
        if direction > 1:
            raise MalformedPayload(f"bad sync direction {direction}")
        params = r.f32(n_params)
        buffers = r.f32(n_buffers)
        r.done()
        return ModelSync("up" if direction == 0 else "down", rnd, cid, params, buffers)
    if kind == MsgType.CONTROL:
        code = r.take(1)[0]
        r.done()
        return Control(code)
    raise MalformedPayload(f"unknown message type {kind}")


# --- traffic accounting -------------------------------------------------

SCHEMES = ("centralized", "fedavg", "splitnn", "split-sparse")


def values_bytes(msg) -> int:
    """Bytes of transmitted scalars only, the convention of the published traffic table.

    Index arrays, headers and framing are excluded; model syncs count
    trainable parameters only.
    """
    if isinstance(msg, SparseMessage):
        return 4 * msg.tensor.count
    if isinstance(msg, DenseMessage):
        return 4 * int(np.size(msg.tensor))
    if isinstance(msg, ModelSync):
        return 4 * int(np.size(msg.params))
    return 0


def sparse_frame_len(rank: int, count: int) -> int:
    return HEADER_LEN + ROUTE.size + 1 + 4 * rank + 4 + 8 * count


def dense_frame_len(rank: int, numel: int) -> int:
    return HEADER_LEN + ROUTE.size + 1 + 4 * rank + 4 * numel


def sync_frame_len(n_params: int, n_buffers: int) -> int:
    return HEADER_LEN + SYNC_HEAD.size + 4 * (n_params + n_buffers)


def traffic_bytes(scheme, model, devices, batch, k=1.0, mode="values-only", cut_index=None, scope="tensor"):
    """Bytes moved per training iteration, both directions, summed over ``devices`` clients.

    ``model`` is a :class:`~splitfed.nn.ModelGraph`; ``cut_index`` defaults
    to the split-learning default cut (after the first convolution).
    """
    from splitfed.nn import buffer_count, param_count
    from splitfed.partition import default_cut

    if mode not in ("values-only", "on-wire"):
        raise ValueError(f"mode must be 'values-only' or 'on-wire', got {mode!r}")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    m = int(devices)
    if scheme == "centralized" or m == 0:
        return 0
    on_wire = mode == "on-wire"
    if scheme == "fedavg":
        p = param_count(model)
        per_msg = sync_frame_len(p, buffer_count(model)) if on_wire else 4 * p
        return m * 2 * per_msg
    cut = default_cut(model) if cut_index is None else cut_index
    cut_shape = (batch,) + tuple(model.shapes[cut])
    numel = math.prod(cut_shape)
    if scheme == "splitnn":
        per_msg = dense_frame_len(len(cut_shape), numel) if on_wire else 4 * numel
        return m * 2 * per_msg
    if scope == "sample":
        count = batch * kept_count(numel // batch, k)
    else:
        count = kept_count(numel, k)
    per_msg = sparse_frame_len(len(cut_shape), count) if on_wire else 4 * count
    return m * 2 * per_msg


@dataclass
class TrafficLedger:
    """Byte counters keyed by (scheme, round, direction) in both accounting modes."""

    values_only: dict = field(default_factory=lambda: defaultdict(int))
    on_wire: dict = field(default_factory=lambda: defaultdict(int))

    def record(self, scheme, rnd, direction, frame: bytes, msg):
        key = (scheme, rnd, direction)
        self.values_only[key] += values_bytes(msg)
        self.on_wire[key] += len(frame)

    def total(self, mode="on-wire", scheme=None, rnd=None, direction=None):
        src = self.on_wire if mode == "on-wire" else self.values_only
        return sum(
            v for (s, r, d), v in src.items()
            if (scheme is None or s == scheme) and (rnd is None or r == rnd) and (direction is None or d == direction)
        )


class LoopbackTransport:
    """In-memory carrier: every message is encoded, accounted and decoded on the far side."""

    def __init__(self, scheme, ledger: TrafficLedger | None = None, tap=None):
        self.scheme = scheme
        self.ledger = ledger if ledger is not None else TrafficLedger()
        self.tap = tap  # optional callable(direction, frame) for inspection

    def send(self, msg, rnd, direction):
        frame = encode(msg)
        self.ledger.record(self.scheme, rnd, direction, frame, msg)
        if self.tap is not None:
            self.tap(direction, frame)
        return decode(frame)
