"""Mobile, edge and interceptor endpoints over loopback TCP.

Each endpoint runs one sequential session: the sender writes a frame and
waits for the reply before sending the next one. The mobile endpoint sends
one latent (without batch axis) per frame. The edge classifies it and
replies with the label, plus scores unless it runs decision-only. The
interceptor sits between them and may perturb each latent before it
reaches the edge.
"""

from __future__ import annotations

import logging
import socket
import threading
from dataclasses import dataclass, field

import torch

from ..attacks import AttackConfig, Oracle, run_attack
from .frames import (
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

log = logging.getLogger(__name__)


def listen(host: str = "127.0.0.1", port: int = 0) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    return srv


def connect(address: tuple[str, int], timeout: float = 30.0) -> socket.socket:
    sock = socket.create_connection(address, timeout=timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return (host or "127.0.0.1", int(port))


@dataclass
class EdgeStats:
    frames: int = 0
    rejected: int = 0


def classify(split, latent: torch.Tensor, decision_only: bool) -> Reply:
    with torch.no_grad():
        logits = split.forward_local(latent.unsqueeze(0))[0]
    label = int(torch.argmax(logits))
    return Reply(label, None if decision_only else tuple(float(v) for v in logits))


def handle_edge_session(conn: socket.socket, split, decision_only: bool = False, stats: EdgeStats | None = None) -> EdgeStats:
    """Serve one connection until the peer closes it."""
    stats = stats or EdgeStats()
    with conn:
        while True:
            try:
                data = recv_message(conn)
            except (ConnectionClosed, ConnectionError, ProtocolError):
                return stats
            try:
                latent = decode_frame(data)
                if latent.dtype != torch.float32:
                    raise ProtocolError(f"edge expects float32 latents, got {latent.dtype}", 5)
                reply = classify(split, latent, decision_only)
                stats.frames += 1
            except Exception as exc:  # malformed frames are dropped, never fatal
                log.warning("edge dropped frame: %s", exc)
                stats.rejected += 1
                reply = Reply(0, None, error=True)
            try:
                send_message(conn, encode_reply(reply))
            except OSError:
                return stats


def run_edge_endpoint(split, server: socket.socket, decision_only: bool = False, sessions: int | None = 1, stop: threading.Event | None = None) -> EdgeStats:
    """Accept ``sessions`` connections one after another (forever if None)."""
    stats = EdgeStats()
    served = 0
    with server:
        while sessions is None or served < sessions:
            if stop is not None and stop.is_set():
                break
            conn, _ = server.accept()
            handle_edge_session(conn, split, decision_only, stats)
            served += 1
    return stats


@dataclass
class MobileResult:
    predictions: list[int] = field(default_factory=list)
    scores: list = field(default_factory=list)
    aborted: bool = False
    error: str = ""


def run_mobile_endpoint(split, inputs, address: tuple[str, int]) -> MobileResult:
    """Send ``forward_mobile(x)`` for each input and collect the edge's replies.

    A lost connection ends the session early; the predictions gathered so far
    are returned with ``aborted`` set.
    """
    result = MobileResult()
    try:
        sock = connect(address)
    except OSError as exc:
        result.aborted, result.error = True, str(exc)
        return result
    with sock:
        for x in inputs:
            with torch.no_grad():
                latent = split.forward_mobile(x.unsqueeze(0))[0]
            try:
                send_message(sock, encode_frame(latent))
                reply = decode_reply(recv_message(sock))
            except (OSError, ProtocolError) as exc:
                result.aborted, result.error = True, str(exc)
                break
            result.predictions.append(-1 if reply.error else reply.label)
            result.scores.append(reply.scores)
    return result


class WireOracle:
    """Forward function that classifies latents by querying the edge over a socket."""

    def __init__(self, sock: socket.socket, num_classes: int):
        self.sock = sock
        self.num_classes = num_classes
        self.queries = 0
        self.decision_only: bool | None = None

    def query(self, latent: torch.Tensor) -> Reply:
        send_message(self.sock, encode_frame(latent.detach().to(torch.float32).contiguous()))
        reply = decode_reply(recv_message(self.sock))
        self.queries += 1
        if reply.error:
            raise ProtocolError("edge rejected a frame", 0)
        self.decision_only = reply.scores is None
        return reply

    def __call__(self, batch: torch.Tensor) -> torch.Tensor:
        rows = []
        for latent in batch:
            reply = self.query(latent)
            if reply.scores is not None:
                rows.append(torch.tensor(reply.scores, dtype=torch.float32))
            else:
                # labels only: a one-hot row so argmax recovers the label
                rows.append(torch.nn.functional.one_hot(torch.tensor(reply.label), self.num_classes).float())
        return torch.stack(rows)


@dataclass
class InterceptStats:
    frames: int = 0
    successes: int = 0
    queries: list[int] = field(default_factory=list)
    results: list = field(default_factory=list)


def run_interceptor(
    listener: socket.socket,
    edge_address: tuple[str, int],
    config: AttackConfig | None,
    num_classes: int = 10,
    white_box=None,
) -> InterceptStats:
    """Man in the middle for one mobile session.

    For each frame the interceptor asks the edge for the clean label (one
    query), attacks the latent through the edge connection and forwards the
    perturbed frame. Gradient attacks need ``white_box``, a split model whose
    local half the adversary holds. ``config=None`` or epsilon 0 relays
    frames untouched.
    """
    stats = InterceptStats()
    conn, _ = listener.accept()
    listener.close()
    edge = connect(edge_address)
    wire = WireOracle(edge, num_classes)
    with conn, edge:
        while True:
            try:
                data = recv_message(conn)
            except (ConnectionClosed, ConnectionError, ProtocolError):
                break
            out = data
            try:
                latent = decode_frame(data)
            except ProtocolError as exc:
                log.warning("interceptor relaying undecodable frame: %s", exc)
                latent = None
            if latent is not None and config is not None and config.epsilon > 0:
                label = wire.query(latent).label
                y = torch.tensor([label])
                if config.family == "gradient":
                    if white_box is None:
                        raise ValueError("gradient attacks need a white-box copy of the local half")
                    oracle = Oracle(white_box.forward_local, "gradient")
                else:
                    oracle = Oracle(wire, "labels" if wire.decision_only else "scores", batch_size=1)
                res = run_attack(config, oracle, latent.unsqueeze(0), y, [stats.frames])[0]
                stats.successes += int(res.success)
                stats.queries.append(res.queries_used)
                stats.results.append(res)
                out = encode_frame(res.perturbed.to(torch.float32).contiguous())
            stats.frames += 1
            try:
                send_message(edge, out)
                reply = recv_message(edge)
                send_message(conn, reply)
            except OSError:
                break
    return stats
