"""Point-to-point message passing among P workers with word accounting.

A message carries a tuple of 1-d numpy arrays plus an optional small
``meta`` header (block ids, flags). Its size in words is the total element
count of the arrays (one value or one index per word); the header only shows
up in the message count.
"""

from __future__ import annotations

import queue
import random
import threading
import time
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, ProtocolError, TransportError, WorkerFailure

PHASES = ("split", "balance", "allgatherv", "consensus", "dense", "gather")
SENT, RECV = "sent", "recv"
DEFAULT_CAPACITY = 64
DEFAULT_TIMEOUT = 120.0


def payload_size(arrays) -> int:
    return int(sum(np.asarray(a).size for a in arrays))


class TrafficLedger:
    """Counters of payload words and messages keyed by (rank, phase, direction)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._words = defaultdict(int)
        self._msgs = defaultdict(int)

    def credit(self, rank, phase, direction, words):
        key = (rank, phase, direction)
        with self._lock:
            self._words[key] += words
            self._msgs[key] += 1

    def words(self, rank=None, phase=None, direction=SENT):
        with self._lock:
            return sum(
                w for (r, p, d), w in self._words.items()
                if d == direction and (rank is None or r == rank) and (phase is None or p == phase)
            )

    def messages(self, rank=None, phase=None, direction=SENT):
        with self._lock:
            return sum(
                m for (r, p, d), m in self._msgs.items()
                if d == direction and (rank is None or r == rank) and (phase is None or p == phase)
            )

    def snapshot(self, rank=None):
        """{(rank, phase, direction): (words, msgs)} copy, optionally for one rank."""
        with self._lock:
            return {
                key: (w, self._msgs[key]) for key, w in self._words.items()
                if rank is None or key[0] == rank
            }

    def conserved(self) -> bool:
        """Words sent equal words received, per phase."""
        with self._lock:
            sent, recv = defaultdict(int), defaultdict(int)
            for (_, p, d), w in self._words.items():
                (sent if d == SENT else recv)[p] += w
            return dict(sent) == dict(recv)


class InProcTransport:
    """Bounded FIFO channel per (src, dst, tag), shared by all ranks.

    ``jitter_seed`` perturbs thread interleavings with seeded yields; message
    contents and ordering per channel do not depend on it.
    """

    def __init__(self, size, capacity=DEFAULT_CAPACITY, timeout=DEFAULT_TIMEOUT, jitter_seed=None):
        self.size = size
        self.capacity = capacity
        self.timeout = timeout
        self._channels = {}
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self._rngs = None
        if jitter_seed is not None:
            self._rngs = [random.Random(jitter_seed * 1_000_003 + r) for r in range(size)]
        self.trace = None

    def _channel(self, key):
        with self._lock:
            ch = self._channels.get(key)
            if ch is None:
                ch = self._channels[key] = queue.Queue(self.capacity)
            return ch

    def _jitter(self, rank):
        if self._rngs is not None and self._rngs[rank].random() < 0.5:
            time.sleep(self._rngs[rank].random() * 1e-4)

    def _wait(self, op):
        deadline = time.monotonic() + self.timeout
        while True:
            if self._closed.is_set():
                raise TransportError("transport closed")
            try:
                return op(0.05)
            except (queue.Full, queue.Empty):
                if time.monotonic() > deadline:
                    raise TransportError("timed out waiting on channel") from None

    def post(self, src, dst, tag, payload):
        if self._closed.is_set():
            raise TransportError("transport closed")
        self._jitter(src)
        ch = self._channel((src, dst, tag))
        self._wait(lambda t: ch.put(payload, timeout=t))
        if self.trace is not None:
            self.trace.append((src, dst, tag, payload_size(payload[1])))

    def take(self, dst, src, tag):
        self._jitter(dst)
        ch = self._channel((src, dst, tag))
        return self._wait(lambda t: ch.get(timeout=t))

    def close(self):
        self._closed.set()

    @property
    def closed(self):
        return self._closed.is_set()


@dataclass
class Ticket:
    words: int

    def wait(self):
        return None


class WorkerCtx:
    """Per-rank handle: rank, world size, transport and ledger."""

    def __init__(self, rank, size, transport, ledger):
        if not 0 <= rank < size:
            raise InvalidArgument(f"rank {rank} outside [0, {size})")
        self.rank = rank
        self.size = size
        self.transport = transport
        self.ledger = ledger

    def _check_peer(self, peer):
        if not 0 <= peer < self.size or peer == self.rank:
            raise InvalidArgument(f"rank {self.rank}: invalid peer {peer}")

    def send(self, dst, tag, *arrays, meta=None) -> Ticket:
        """Enqueue ``arrays`` for ``dst``; FIFO per (src, dst, tag)."""
        self._check_peer(dst)
        arrays = tuple(np.asarray(a) for a in arrays)
        words = payload_size(arrays)
        self.transport.post(self.rank, dst, tag, (meta, arrays))
        self.ledger.credit(self.rank, tag, SENT, words)
        return Ticket(words)

    def recv(self, src, tag, with_meta=False):
        """Block until the next message from ``src`` under ``tag`` arrives."""
        self._check_peer(src)
        meta, arrays = self.transport.take(self.rank, src, tag)
        self.ledger.credit(self.rank, tag, RECV, payload_size(arrays))
        return (meta, arrays) if with_meta else arrays


def is_pow2(p: int) -> bool:
    return p >= 1 and p & (p - 1) == 0


def allgather_blocks(ctx, block, tag):
    """Every rank ends with all ranks' blocks (each a tuple of arrays), in rank order.

    Recursive doubling for power-of-two P, Bruck's dissemination otherwise;
    both take ceil(log2 P) rounds and move each foreign block to a rank once.
    """
    P, me = ctx.size, ctx.rank
    blocks = {me: tuple(block)}
    if P == 1:
        return [blocks[me]]
    if is_pow2(P):
        mask = 1
        while mask < P:
            partner = me ^ mask
            mine = sorted(blocks)
            ctx.send(partner, tag, *_flatten(blocks, mine), meta=mine)
            blocks.update(_unflatten(*ctx.recv(partner, tag, with_meta=True)))
            mask <<= 1
    else:
        dist = 1
        while dist < P:
            count = min(dist, P - dist)
            owned = [(me + j) % P for j in range(count)]
            ctx.send((me - dist) % P, tag, *_flatten(blocks, owned), meta=owned)
            blocks.update(_unflatten(*ctx.recv((me + dist) % P, tag, with_meta=True)))
            dist <<= 1
    return [blocks[r] for r in range(P)]


def _flatten(blocks, ranks):
    out = []
    for r in ranks:
        out.extend(blocks[r])
    return out


def _unflatten(ids, arrays):
    width = len(arrays) // len(ids)
    return {int(r): tuple(arrays[i * width:(i + 1) * width]) for i, r in enumerate(ids)}


def small_allreduce_avg(ctx, vec, tag="consensus"):
    """Element-wise mean of a short vector over all ranks, identical everywhere."""
    vec = np.asarray(vec, dtype=np.float64)
    gathered = allgather_blocks(ctx, (vec,), tag)
    lens = {b[0].size for b in gathered}
    if len(lens) != 1:
        raise ProtocolError(f"vector lengths differ across ranks: {sorted(lens)}")
    acc = gathered[0][0].copy()
    for b in gathered[1:]:
        acc = acc + b[0]
    return acc / ctx.size


def run_workers(size, fn, transport=None, ledger=None, **kw):
    """Run ``fn(ctx)`` on ``size`` threads; return per-rank results.

    ``transport`` is either a shared in-process transport or a callable
    ``rank -> transport`` for per-rank backends. The first failure closes the
    transport(s) so blocked peers unwind, and is re-raised with its rank.
    """
    ledger = ledger if ledger is not None else TrafficLedger()
    if transport is None:
        transport = InProcTransport(size, **kw)
    if callable(transport) and not hasattr(transport, "post"):
        per_rank = [None] * size
        factory = transport
    else:
        per_rank = [transport] * size
        factory = None
    results = [None] * size
    errors = {}

    def body(rank):
        try:
            if factory is not None:
                per_rank[rank] = factory(rank)
            results[rank] = fn(WorkerCtx(rank, size, per_rank[rank], ledger))
        except BaseException as exc:  # noqa: BLE001 - re-raised below with rank
            errors[rank] = exc
            for t in per_rank:
                if t is not None:
                    t.close()

    threads = [threading.Thread(target=body, args=(r,), daemon=True) for r in range(size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if factory is not None:
        for t in per_rank:
            if t is not None:
                t.close()
    if errors:
        # prefer the root cause over peers that only saw the shutdown
        root = [r for r, e in errors.items() if not isinstance(e, TransportError)]
        rank = min(root) if root else min(errors)
        raise WorkerFailure(rank, errors[rank]) from errors[rank]
    return results
