"""TCP backend: one duplex socket per rank pair, 4-byte length-prefixed frames.

Frame body: ``u8 taglen | tag | i32 nmeta (-1 = none) | i64 meta... |
u8 narrays | per array: u8 dtlen | dtype str | u32 count | raw bytes``.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, ProtocolError, TransportError
from .transport import DEFAULT_TIMEOUT


def read_rank_map(path) -> dict[int, tuple[str, int]]:
    """Parse ``rank host:port`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rank_s, addr = line.split()
            host, port_s = addr.rsplit(":", 1)
            rank, port = int(rank_s), int(port_s)
        except ValueError:
            raise InvalidArgument(f"{path}:{lineno}: expected 'rank host:port', got {line!r}") from None
        if rank in out:
            raise InvalidArgument(f"{path}:{lineno}: duplicate rank {rank}")
        out[rank] = (host, port)
    if sorted(out) != list(range(len(out))):
        raise InvalidArgument(f"{path}: ranks must be exactly 0..P-1")
    return out


def encode_frame(tag, meta, arrays) -> bytes:
    tb = tag.encode()
    parts = [struct.pack("<B", len(tb)), tb]
    if meta is None:
        parts.append(struct.pack("<i", -1))
    else:
        parts.append(struct.pack("<i", len(meta)))
        parts.append(np.asarray(meta, dtype="<i8").tobytes())
    parts.append(struct.pack("<B", len(arrays)))
    for a in arrays:
        a = np.ascontiguousarray(a)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        dt = a.dtype.str.encode()
        parts += [struct.pack("<B", len(dt)), dt, struct.pack("<I", a.size), a.tobytes()]
    body = b"".join(parts)
    return struct.pack("<I", len(body)) + body


def decode_frame(body: bytes):
    try:
        off = 0
        (tl,) = struct.unpack_from("<B", body, off)
        off += 1
        tag = body[off:off + tl].decode()
        off += tl
        (nm,) = struct.unpack_from("<i", body, off)
        off += 4
        meta = None
        if nm >= 0:
            meta = np.frombuffer(body, dtype="<i8", count=nm, offset=off).tolist()
            off += 8 * nm
        (na,) = struct.unpack_from("<B", body, off)
        off += 1
        arrays = []
        for _ in range(na):
            (dl,) = struct.unpack_from("<B", body, off)
            off += 1
            dt = np.dtype(body[off:off + dl].decode())
            off += dl
            (cnt,) = struct.unpack_from("<I", body, off)
            off += 4
            arrays.append(np.frombuffer(body, dtype=dt, count=cnt, offset=off).astype(dt.newbyteorder("=")))
            off += cnt * dt.itemsize
    except (struct.error, ValueError, TypeError) as exc:
        raise ProtocolError(f"malformed frame: {exc}") from exc
    if off != len(body):
        raise ProtocolError("trailing bytes in frame")
    return tag, meta, tuple(arrays)


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf += chunk
    return bytes(buf)


class TcpTransport:
    """Transport for a single rank. Lower ranks accept, higher ranks connect."""

    def __init__(self, rank, addresses, timeout=DEFAULT_TIMEOUT):
        self.rank = rank
        self.size = len(addresses)
        self.addresses = addresses
        self.timeout = timeout
        self._socks = {}
        self._send_locks = {}
        self._inbox = {}
        self._inbox_lock = threading.Lock()
        self._closed = threading.Event()
        self._readers = []
        self._listener = None

    def start(self):
        host, port = self.addresses[self.rank]
        lst = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        lst.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        lst.bind((host, port))
        lst.listen(self.size)
        lst.settimeout(self.timeout)
        self._listener = lst
        for peer in range(self.rank):
            self._attach(peer, self._connect(peer))
        for _ in range(self.rank + 1, self.size):
            try:
                conn, _ = lst.accept()
            except socket.timeout:
                raise TransportError(f"rank {self.rank}: peers did not connect") from None
            conn.settimeout(None)
            (peer,) = struct.unpack("<I", _recv_exact(conn, 4))
            self._attach(peer, conn)
        return self

    def _connect(self, peer):
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                s = socket.create_connection(self.addresses[peer], timeout=1.0)
                s.settimeout(None)
                s.sendall(struct.pack("<I", self.rank))
                return s
            except OSError:
                if time.monotonic() > deadline:
                    raise TransportError(f"rank {self.rank}: cannot reach rank {peer}") from None
                time.sleep(0.02)

    def _attach(self, peer, sock):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._socks[peer] = sock
        self._send_locks[peer] = threading.Lock()
        t = threading.Thread(target=self._reader, args=(peer, sock), daemon=True)
        t.start()
        self._readers.append(t)

    def _box(self, key):
        with self._inbox_lock:
            box = self._inbox.get(key)
            if box is None:
                box = self._inbox[key] = queue.Queue()
            return box

    def _reader(self, peer, sock):
        try:
            while True:
                (length,) = struct.unpack("<I", _recv_exact(sock, 4))
                tag, meta, arrays = decode_frame(_recv_exact(sock, length))
                self._box((peer, tag)).put((meta, arrays))
        except (OSError, ConnectionError, ProtocolError):
            if not self._closed.is_set():
                self.close()

    def post(self, src, dst, tag, payload):
        if self._closed.is_set():
            raise TransportError("transport closed")
        if src != self.rank:
            raise InvalidArgument("TCP transport sends only on behalf of its own rank")
        meta, arrays = payload
        frame = encode_frame(tag, meta, arrays)
        try:
            with self._send_locks[dst]:
                self._socks[dst].sendall(frame)
        except OSError as exc:
            raise TransportError(f"send to rank {dst} failed: {exc}") from exc

    def take(self, dst, src, tag):
        box = self._box((src, tag))
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                return box.get(timeout=0.05)
            except queue.Empty:
                if self._closed.is_set():
                    raise TransportError("transport closed") from None
                if time.monotonic() > deadline:
                    raise TransportError("timed out waiting on channel") from None

    def close(self):
        if self._closed.is_set():
            return
        self._closed.set()
        for s in list(self._socks.values()):
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
        if self._listener is not None:
            self._listener.close()

    @property
    def closed(self):
        return self._closed.is_set()


def tcp_factory(addresses, timeout=DEFAULT_TIMEOUT):
    """``rank -> started TcpTransport``; for use with ``run_workers``."""
    return lambda rank: TcpTransport(rank, addresses, timeout).start()
