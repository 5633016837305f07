import socket

import numpy as np
import pytest

from oklab.collectives import dense_allreduce
from oklab.errors import InvalidArgument, ProtocolError
from oklab.oktopk import OkState, ok_sparse_allreduce
from oklab.tcp import decode_frame, encode_frame, read_rank_map, tcp_factory
from oklab.transport import TrafficLedger, run_workers


def free_ports(count):
    socks = [socket.socket() for _ in range(count)]
    for s in socks:
        s.bind(("127.0.0.1", 0))
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def write_map(tmp_path, P):
    path = tmp_path / "ranks.txt"
    path.write_text("# rank map\n" + "".join(f"{r} 127.0.0.1:{p}\n" for r, p in enumerate(free_ports(P))))
    return path


def test_rank_map_parse(tmp_path):
    path = write_map(tmp_path, 3)
    m = read_rank_map(path)
    assert sorted(m) == [0, 1, 2]
    assert all(h == "127.0.0.1" for h, _ in m.values())


@pytest.mark.parametrize("text", ["0 host\n", "0 a:1\n0 b:2\n", "1 a:1\n"])
def test_rank_map_errors(tmp_path, text):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(InvalidArgument):
        read_rank_map(path)


def test_frame_round_trip():
    arrays = (np.arange(5, dtype=np.int64), np.linspace(0, 1, 5), np.empty(0))
    body = encode_frame("split", [3, 4], arrays)[4:]
    tag, meta, got = decode_frame(body)
    assert tag == "split" and meta == [3, 4]
    for a, b in zip(arrays, got):
        assert a.dtype == b.dtype and np.array_equal(a, b)
    assert decode_frame(encode_frame("x", None, ())[4:]) == ("x", None, ())


def test_frame_truncated():
    body = encode_frame("split", None, (np.arange(5.0),))[4:]
    with pytest.raises(ProtocolError):
        decode_frame(body[:-3])


def test_tcp_dense_allreduce(tmp_path):
    P = 4
    addrs = read_rank_map(write_map(tmp_path, P))
    vecs = np.random.default_rng(0).standard_normal((P, 16))
    ledger = TrafficLedger()
    res = run_workers(P, lambda c: dense_allreduce(c, vecs[c.rank]), transport=tcp_factory(addrs, 20), ledger=ledger)
    for r in res:
        np.testing.assert_allclose(r, vecs.sum(axis=0), rtol=1e-12)
    assert all(ledger.words(r, "dense") == 24 for r in range(P))
    assert ledger.conserved()


def test_tcp_matches_inproc(tmp_path):
    P, n, k = 4, 400, 8
    G = np.random.default_rng(5).standard_normal((P, n))

    def body(ctx):
        st = OkState.create(2, 2)
        return [ok_sparse_allreduce(ctx, st, G[ctx.rank] * (1 + 0.01 * t), t, k)[0] for t in range(1, 5)]

    addrs = read_rank_map(write_map(tmp_path, P))
    tcp_led, inp_led = TrafficLedger(), TrafficLedger()
    tcp = run_workers(P, body, transport=tcp_factory(addrs, 20), ledger=tcp_led)
    inp = run_workers(P, body, ledger=inp_led)
    for a, b in zip(tcp[0], inp[0]):
        assert a.same_as(b)
    assert tcp_led.snapshot() == inp_led.snapshot()
