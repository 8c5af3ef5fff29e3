"""Split inference over a byte-exact wire protocol, with a man-in-the-middle interceptor."""

from .endpoints import (
    EdgeStats,
    InterceptStats,
    MobileResult,
    WireOracle,
    classify,
    connect,
    handle_edge_session,
    listen,
    parse_address,
    run_edge_endpoint,
    run_interceptor,
    run_mobile_endpoint,
)
from .frames import (
    DTYPES,
    MAGIC,
    VERSION,
    ConnectionClosed,
    ProtocolError,
    Reply,
    decode_frame,
    decode_reply,
    encode_frame,
    encode_reply,
    recv_message,
    send_message,
)

__all__ = [
    "DTYPES",
    "MAGIC",
    "VERSION",
    "ConnectionClosed",
    "EdgeStats",
    "InterceptStats",
    "MobileResult",
    "ProtocolError",
    "Reply",
    "WireOracle",
    "classify",
    "connect",
    "decode_frame",
    "decode_reply",
    "encode_frame",
    "encode_reply",
    "handle_edge_session",
    "listen",
    "parse_address",
    "recv_message",
    "run_edge_endpoint",
    "run_interceptor",
    "run_mobile_endpoint",
    "send_message",
]
