"""LatentFrame wire format and length-prefixed message framing.

Frame layout (all integers little-endian)::

    offset 0   magic    b"ADVL"
    offset 4   version  u8 = 1
    offset 5   dtype    u8  (0 float32, 1 uint8, 2 uint16)
    offset 6   rank     u8  (<= 8)
    offset 7   dims     rank x u32
    then       payload  prod(dims) x itemsize bytes, row-major

Replies from the edge use a second small layout::

    b"ADVR" | version u8 | flags u8 | label u32 | count u16 | count x float32

``flags`` bit 0 means scores are present; bit 1 marks a rejected frame.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch

MAGIC = b"ADVL"
REPLY_MAGIC = b"ADVR"
VERSION = 1
MAX_RANK = 8
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<u2")}
DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1, np.dtype("uint16"): 2}
HEADER = 7
FLAG_SCORES = 1
FLAG_ERROR = 2


class ProtocolError(ValueError):
    """Malformed frame or message; ``offset`` is the byte where decoding failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu()
        if t.dtype == torch.uint16:
            return t.view(torch.int16).numpy().view(np.uint16)
        return t.numpy()
    return np.asarray(t)


def encode_frame(t) -> bytes:
    """Serialize a float32 / uint8 / uint16 tensor (or array) as a LatentFrame."""
    arr = _to_numpy(t)
    code = DTYPE_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ProtocolError(f"unsupported dtype {arr.dtype}", 5)
    if arr.ndim > MAX_RANK:
        raise ProtocolError(f"rank {arr.ndim} exceeds {MAX_RANK}", 6)
    if any(d >= 2**32 for d in arr.shape):
        raise ProtocolError("dimension does not fit in u32", HEADER)
    payload = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
    return MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape) + payload


def decode_frame_array(data: bytes) -> np.ndarray:
    data = bytes(data)
    if len(data) < HEADER:
        raise ProtocolError(f"truncated header: {len(data)} of {HEADER} bytes", len(data))
    if data[:4] != MAGIC:
        raise ProtocolError(f"bad magic {data[:4]!r}", 0)
    version, code, rank = data[4], data[5], data[6]
    if version != VERSION:
        raise ProtocolError(f"unknown version {version}", 4)
    if code not in DTYPES:
        raise ProtocolError(f"unknown dtype code {code}", 5)
    if rank > MAX_RANK:
        raise ProtocolError(f"rank {rank} exceeds {MAX_RANK}", 6)
    end = HEADER + 4 * rank
    if len(data) < end:
        raise ProtocolError(f"truncated dims: need {end} bytes, have {len(data)}", len(data))
    dims = struct.unpack_from(f"<{rank}I", data, HEADER)
    dtype = DTYPES[code]
    size = math.prod(dims) * dtype.itemsize
    if len(data) - end != size:
        what = "truncated payload" if len(data) - end < size else "trailing bytes after payload"
        raise ProtocolError(f"{what}: expected {size} payload bytes, got {len(data) - end}", min(len(data), end + size))
    return np.frombuffer(data, dtype=dtype, count=math.prod(dims), offset=end).reshape(dims).copy()


def decode_frame(data: bytes) -> torch.Tensor:
    """Inverse of :func:`encode_frame`; bit-exact."""
    arr = decode_frame_array(data)
    if arr.dtype == np.dtype("<u2"):
        return torch.from_numpy(arr.astype(np.uint16).view(np.int16)).view(torch.uint16)
    return torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))


@dataclass(frozen=True)
class Reply:
    label: int
    scores: tuple[float, ...] | None = None
    error: bool = False


def encode_reply(reply: Reply) -> bytes:
    flags = (FLAG_SCORES if reply.scores is not None else 0) | (FLAG_ERROR if reply.error else 0)
    scores = np.asarray(reply.scores if reply.scores is not None else [], dtype="<f4")
    return REPLY_MAGIC + struct.pack("<BBIH", VERSION, flags, int(reply.label), scores.size) + scores.tobytes()


def decode_reply(data: bytes) -> Reply:
    data = bytes(data)
    if len(data) < 12:
        raise ProtocolError("truncated reply", len(data))
    if data[:4] != REPLY_MAGIC:
        raise ProtocolError(f"bad reply magic {data[:4]!r}", 0)
    version, flags, label, count = struct.unpack_from("<BBIH", data, 4)
    if version != VERSION:
        raise ProtocolError(f"unknown version {version}", 4)
    if len(data) != 12 + 4 * count:
        raise ProtocolError("reply length does not match score count", len(data))
    scores = tuple(float(v) for v in np.frombuffer(data, dtype="<f4", offset=12)) if flags & FLAG_SCORES else None
    return Reply(int(label), scores, bool(flags & FLAG_ERROR))


# length-prefixed messages over a byte stream

MAX_MESSAGE = 1 << 30


class ConnectionClosed(ConnectionError):
    pass


def send_message(sock, payload: bytes) -> None:
    sock.sendall(struct.pack("<I", len(payload)) + payload)


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionClosed(f"peer closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def recv_message(sock) -> bytes:
    (n,) = struct.unpack("<I", _recv_exact(sock, 4))
    if n > MAX_MESSAGE:
        raise ProtocolError(f"message length {n} exceeds limit", 0)
    return _recv_exact(sock, n)
