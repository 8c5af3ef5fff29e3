"""LatentFrame encoding and mobile / interceptor / edge sessions over loopback TCP."""

import struct
import threading

import numpy as np
import pytest
import torch

from advlatent.attacks import AttackConfig, Oracle, run_attack
from advlatent.harness import (
    MAGIC,
    ProtocolError,
    Reply,
    connect,
    decode_frame,
    decode_reply,
    encode_frame,
    encode_reply,
    listen,
    parse_address,
    recv_message,
    run_edge_endpoint,
    run_interceptor,
    run_mobile_endpoint,
    send_message,
)
from advlatent.splitnet import mnist_cnn, split_model


@pytest.fixture(scope="module")
def split():
    torch.manual_seed(0)
    g = mnist_cnn()
    g.eval()
    return split_model(g, 2)


@pytest.fixture(scope="module")
def inputs():
    return torch.rand(12, 1, 28, 28, generator=torch.Generator().manual_seed(4))


class TestFrames:
    def test_layout_size(self):
        frame = encode_frame(torch.zeros(2, 2))
        assert len(frame) == 4 + 1 + 1 + 1 + 8 + 16 == 31
        assert frame[:4] == MAGIC and frame[4] == 1 and frame[5] == 0 and frame[6] == 2
        assert struct.unpack("<2I", frame[7:15]) == (2, 2)

    def test_payload_little_endian_row_major(self):
        frame = encode_frame(torch.tensor([[1.0, 2.0], [3.0, 4.0]]))
        assert struct.unpack("<4f", frame[15:]) == (1.0, 2.0, 3.0, 4.0)

    @pytest.mark.parametrize("dtype", [torch.float32, torch.uint8, torch.uint16])
    def test_round_trip_bitwise(self, dtype):
        g = torch.Generator().manual_seed(0)
        for shape in [(), (5,), (3, 4, 5), (1, 2, 1, 3, 1, 2, 1, 2)]:
            if dtype == torch.float32:
                t = torch.randn(shape, generator=g)
            else:
                hi = 256 if dtype == torch.uint8 else 65536
                t = torch.randint(0, hi, shape, generator=g, dtype=torch.int64).to(torch.int32).to(dtype)
            frame = encode_frame(t)
            back = decode_frame(frame)
            assert back.dtype == dtype and tuple(back.shape) == shape
            assert encode_frame(back) == frame

    def test_special_floats_preserved(self):
        t = torch.tensor([float("nan"), float("inf"), -0.0, 1e-45])
        assert encode_frame(decode_frame(encode_frame(t))) == encode_frame(t)

    def test_bad_magic(self):
        frame = b"XXXX" + encode_frame(torch.zeros(2))[4:]
        with pytest.raises(ProtocolError) as err:
            decode_frame(frame)
        assert err.value.offset == 0

    def test_bad_version_and_dtype(self):
        frame = bytearray(encode_frame(torch.zeros(2)))
        frame[4] = 9
        with pytest.raises(ProtocolError):
            decode_frame(bytes(frame))
        frame[4], frame[5] = 1, 7
        with pytest.raises(ProtocolError) as err:
            decode_frame(bytes(frame))
        assert err.value.offset == 5

    def test_truncated_and_trailing(self):
        frame = encode_frame(torch.zeros(3, 3))
        with pytest.raises(ProtocolError):
            decode_frame(frame[:-1])
        with pytest.raises(ProtocolError):
            decode_frame(frame + b"\0")
        with pytest.raises(ProtocolError):
            decode_frame(frame[:5])

    def test_rank_limit(self):
        with pytest.raises(ProtocolError):
            encode_frame(torch.zeros([1] * 9))
        with pytest.raises(ProtocolError):
            encode_frame(torch.zeros(2, dtype=torch.float64))

    def test_fuzz_never_crashes(self):
        rng = np.random.default_rng(0)
        base = encode_frame(torch.randn(2, 3, 4))
        for _ in range(2000):
            data = bytearray(base)
            if rng.random() < 0.5:
                data = data[: rng.integers(0, len(data))]
            for _ in range(rng.integers(1, 4)):
                if data:
                    data[rng.integers(0, len(data))] = rng.integers(0, 256)
            try:
                decode_frame(bytes(data))
            except ProtocolError:
                pass

    def test_reply_round_trip(self):
        for reply in (Reply(3, (0.5, -1.25, 2.0)), Reply(7), Reply(0, None, error=True)):
            assert decode_reply(encode_reply(reply)) == reply

    def test_parse_address(self):
        assert parse_address("localhost:9000") == ("localhost", 9000)
        assert parse_address(":81") == ("127.0.0.1", 81)


def _serve(target, *args, **kwargs):
    out = {}

    def run():
        out["value"] = target(*args, **kwargs)

    th = threading.Thread(target=run, daemon=True)
    th.start()
    return th, out


def _logits(split, inputs):
    # one sample per forward pass, as on the wire
    with torch.no_grad():
        return torch.cat([split(x.unsqueeze(0)) for x in inputs])


def _in_process(split, inputs):
    return _logits(split, inputs).argmax(1).tolist()


class TestSessions:
    def test_wire_matches_in_process(self, split, inputs):
        srv = listen()
        th, out = _serve(run_edge_endpoint, split, srv)
        res = run_mobile_endpoint(split, inputs, srv.getsockname())
        th.join(10)
        assert not res.aborted
        assert res.predictions == _in_process(split, inputs)
        assert out["value"].frames == len(inputs)
        np.testing.assert_array_equal(np.array(res.scores, dtype=np.float32), _logits(split, inputs).numpy())

    def test_decision_only_suppresses_scores(self, split, inputs):
        srv = listen()
        th, _ = _serve(run_edge_endpoint, split, srv, decision_only=True)
        res = run_mobile_endpoint(split, inputs[:3], srv.getsockname())
        th.join(10)
        assert res.scores == [None, None, None]
        assert res.predictions == _in_process(split, inputs[:3])

    def test_malformed_frame_gets_error_reply(self, split):
        srv = listen()
        th, out = _serve(run_edge_endpoint, split, srv)
        with connect(srv.getsockname()) as sock:
            send_message(sock, b"garbage")
            assert decode_reply(recv_message(sock)).error
            send_message(sock, encode_frame(torch.zeros(64, 14, 14, dtype=torch.uint8)))
            assert decode_reply(recv_message(sock)).error
            send_message(sock, encode_frame(torch.zeros(64, 14, 14)))
            assert not decode_reply(recv_message(sock)).error
        th.join(10)
        assert out["value"].rejected == 2 and out["value"].frames == 1

    def test_connection_loss_flushes_partial(self, split, inputs):
        srv = listen()

        def one_then_close(server):
            conn, _ = server.accept()
            with conn:
                recv_message(conn)
                send_message(conn, encode_reply(Reply(4, None)))
            server.close()

        th = threading.Thread(target=one_then_close, args=(srv,), daemon=True)
        th.start()
        res = run_mobile_endpoint(split, inputs[:5], srv.getsockname())
        th.join(10)
        assert res.aborted
        assert res.predictions == [4]

    def test_unreachable_edge(self, split, inputs):
        srv = listen()
        addr = srv.getsockname()
        srv.close()
        res = run_mobile_endpoint(split, inputs[:2], addr)
        assert res.aborted and res.predictions == []


def _chain(split, inputs, config, decision_only=False, white_box=None):
    edge_srv = listen()
    mitm_srv = listen()
    edge_th, edge_out = _serve(run_edge_endpoint, split, edge_srv, decision_only=decision_only, sessions=1)
    mitm_th, mitm_out = _serve(run_interceptor, mitm_srv, edge_srv.getsockname(), config, 10, white_box)
    res = run_mobile_endpoint(split, inputs, mitm_srv.getsockname())
    mitm_th.join(60)
    edge_th.join(60)
    return res, mitm_out["value"], edge_out["value"]


class TestInterceptor:
    def test_relay_without_attack(self, split, inputs):
        res, stats, _ = _chain(split, inputs, None)
        assert res.predictions == _in_process(split, inputs)
        assert stats.frames == len(inputs)

    @pytest.mark.parametrize("algo, norm", [("SQUARE", "linf"), ("SIGNOPT", "l2"), ("PGD", "linf")])
    def test_zero_budget_is_identity(self, split, inputs, algo, norm):
        res, _, _ = _chain(split, inputs, AttackConfig(algo, norm, 0.0), white_box=split)
        assert res.predictions == _in_process(split, inputs)

    def test_score_attack_parity(self, split, inputs):
        config = AttackConfig("SQUARE", "linf", 0.3, space="latent", query_budget=60, seed=5)
        res, stats, _ = _chain(split, inputs, config)
        with torch.no_grad():
            latents = split.forward_mobile(inputs)
            clean = split.forward_local(latents).argmax(1)
        local = [
            run_attack(config, Oracle(split.forward_local, "scores"), latents[i : i + 1], clean[i : i + 1], [i])[0]
            for i in range(len(inputs))
        ]
        assert [r.success for r in stats.results] == [r.success for r in local]
        assert [r.queries_used for r in stats.results] == [r.queries_used for r in local]
        # a successful perturbation is misclassified at the edge
        for r, p, c in zip(stats.results, res.predictions, clean.tolist()):
            assert (p != c) == r.success

    def test_decision_only_parity(self, split, inputs):
        config = AttackConfig("TRIANGLE", "l2", 0.5, space="latent", query_budget=80, seed=1)
        _, stats, _ = _chain(split, inputs[:4], config, decision_only=True)
        with torch.no_grad():
            latents = split.forward_mobile(inputs[:4])
            clean = split.forward_local(latents).argmax(1)
        local = [
            run_attack(config, Oracle(split.forward_local, "labels"), latents[i : i + 1], clean[i : i + 1], [i])[0]
            for i in range(4)
        ]
        assert [r.success for r in stats.results] == [r.success for r in local]

    def test_gradient_attack_uses_white_box_copy(self, split, inputs):
        config = AttackConfig("PGD", "linf", 1.0, space="latent", steps=20)
        res, stats, _ = _chain(split, inputs, config, white_box=split)
        clean = _in_process(split, inputs)
        for r, p, c in zip(stats.results, res.predictions, clean):
            assert (p != c) == r.success
        assert stats.successes > 0
