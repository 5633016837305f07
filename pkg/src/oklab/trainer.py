"""Ok-Topk SGD with residual accumulation, dense SGD, xi instrumentation and toy problems."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .collectives import dense_allreduce
from .errors import InvalidArgument, NumericError, UndefinedRatio
from .oktopk import OkState, ok_sparse_allreduce
from .sparse import topk_exact


@dataclass
class ModelState:
    w: np.ndarray
    t: int = 0
    lr: float = 0.1
    decay: bool = False  # lr / sqrt(t) when set

    def lr_at(self, t):
        return self.lr / math.sqrt(t) if self.decay else self.lr


@dataclass
class Residual:
    eps: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n))


# ---------------------------------------------------------------- problems

class Quadratic:
    """f(w) = 1/2 |w|^2 on every rank."""

    kind = "quadratic"

    def __init__(self, n, seed=0):
        self.n = n
        self.seed = seed

    def init_weights(self):
        return np.random.default_rng([self.seed, 7]).standard_normal(self.n)

    def gradient(self, w, rank, t):
        return np.array(w, dtype=np.float64, copy=True)

    def objective(self, w):
        return 0.5 * float(np.dot(w, w))


class LeastSquares:
    """f(w) = |Aw - b|^2 / (2N); rows sharded contiguously by rank.

    ``batch`` rows are drawn per (rank, t) from the rank's shard; ``None``
    uses the full shard.
    """

    kind = "lsq"

    def __init__(self, n, P, seed=0, rows_per_rank=None, batch=None, noise=0.5, col_decay=1.5):
        self.n, self.P, self.seed = n, P, seed
        self.m = rows_per_rank or 2 * n
        self.batch = batch
        rng = np.random.default_rng([seed, 11])
        N = self.m * P
        # column j scaled by (1 + j)^-col_decay in a seeded order
        scales = (1.0 + rng.permutation(n)) ** (-col_decay)
        self.A = rng.standard_normal((N, n)) * scales
        self.w_star = rng.standard_normal(n)
        self.b = self.A @ self.w_star + noise * rng.standard_normal(N)

    def shard(self, rank):
        lo = rank * self.m
        return self.A[lo:lo + self.m], self.b[lo:lo + self.m]

    def lipschitz(self):
        return float(np.linalg.eigvalsh(self.A.T @ self.A / self.A.shape[0]).max())

    def init_weights(self):
        return np.zeros(self.n)

    def gradient(self, w, rank, t):
        A, b = self.shard(rank)
        if self.batch is not None and self.batch < self.m:
            rows = np.random.default_rng([self.seed, rank, t]).choice(self.m, self.batch, replace=False)
            A, b = A[rows], b[rows]
        return A.T @ (A @ w - b) / A.shape[0]

    def objective(self, w):
        r = self.A @ w - self.b
        return 0.5 * float(r @ r) / self.A.shape[0]


class TinyMLP:
    """One tanh hidden layer regressing a random teacher; spare parameters idle."""

    kind = "mlp"
    d_in = 8

    def __init__(self, n, P, seed=0, rows_per_rank=64, batch=16):
        self.hidden = (n - 1) // (self.d_in + 2)
        if self.hidden < 1:
            raise InvalidArgument(f"n={n} too small for an MLP")
        self.n, self.P, self.seed, self.m, self.batch = n, P, seed, rows_per_rank, batch
        rng = np.random.default_rng([seed, 13])
        self.X = rng.standard_normal((rows_per_rank * P, self.d_in))
        teacher = rng.standard_normal(self.d_in)
        self.y = np.tanh(self.X @ teacher) + 0.05 * rng.standard_normal(rows_per_rank * P)

    def _unpack(self, w):
        h, d = self.hidden, self.d_in
        W1 = w[:h * d].reshape(h, d)
        b1 = w[h * d:h * d + h]
        w2 = w[h * d + h:h * d + 2 * h]
        b2 = w[h * d + 2 * h]
        return W1, b1, w2, b2

    def init_weights(self):
        w = np.zeros(self.n)
        used = self.hidden * (self.d_in + 2) + 1
        w[:used] = 0.3 * np.random.default_rng([self.seed, 17]).standard_normal(used)
        return w

    def _loss_grad(self, w, X, y):
        W1, b1, w2, b2 = self._unpack(w)
        H = np.tanh(X @ W1.T + b1)
        err = H @ w2 + b2 - y
        m = X.shape[0]
        g = np.zeros(self.n)
        h, d = self.hidden, self.d_in
        dH = np.outer(err, w2) * (1 - H * H) / m
        g[:h * d] = (dH.T @ X).ravel()
        g[h * d:h * d + h] = dH.sum(axis=0)
        g[h * d + h:h * d + 2 * h] = H.T @ err / m
        g[h * d + 2 * h] = err.mean()
        return 0.5 * float(err @ err) / m, g

    def gradient(self, w, rank, t):
        lo = rank * self.m
        rows = lo + np.random.default_rng([self.seed, rank, t]).choice(self.m, self.batch, replace=False)
        return self._loss_grad(w, self.X[rows], self.y[rows])[1]

    def objective(self, w):
        return self._loss_grad(w, self.X, self.y)[0]


# ----------------------------------------------------- gradient processes

_M1, _M2, _M3 = np.uint64(0x9E3779B97F4A7C15), np.uint64(0xBF58476D1CE4E5B9), np.uint64(0x94D049BB133111EB)


def _mix(x):
    """splitmix64 finaliser on uint64 arrays."""
    with np.errstate(over="ignore"):
        x = (x + _M1).astype(np.uint64)
        x = (x ^ (x >> np.uint64(30))) * _M2
        x = (x ^ (x >> np.uint64(27))) * _M3
        return x ^ (x >> np.uint64(31))


def _unit(x):
    return (x >> np.uint64(11)).astype(np.float64) / float(1 << 53)


class DriftingProcess:
    """Slowly changing synthetic gradient stream.

    A small set of heavy slots (``heavy`` fraction of n) sits on top of unit
    Gaussian noise. Each slot keeps its coordinate and magnitude for
    ``mixing_period`` iterations (phases staggered), so only a few slots move
    per step; the overall scale decays like (1 + t/1000)^-decay.
    """

    def __init__(self, n, seed=0, heavy=0.02, mixing_period=256, decay=0.5, noise=1.0, jitter=0.1):
        self.n, self.seed = n, seed
        self.slots = max(1, int(round(heavy * n)))
        self.mixing_period = mixing_period
        self.decay, self.noise, self.jitter = decay, noise, jitter
        j = np.arange(self.slots, dtype=np.uint64)
        s = np.uint64(seed & 0xFFFFFFFF)
        self._slot_key = _mix(j ^ (s << np.uint64(32)))
        self._phase = (_mix(self._slot_key) % np.uint64(max(mixing_period, 1))).astype(np.int64)

    def scale(self, t):
        return (1.0 + t / 1000.0) ** (-self.decay)

    def _slots_at(self, t):
        if self.mixing_period:
            epoch = ((t + self._phase) // self.mixing_period).astype(np.uint64)
        else:
            epoch = np.zeros(self.slots, dtype=np.uint64)
        h = _mix(self._slot_key ^ _mix(epoch))
        pos = (h % np.uint64(self.n)).astype(np.int64)
        h2 = _mix(h)
        mag = 3.0 - 2.0 * np.log1p(-_unit(h2))  # 3 + Exp(mean 2)
        sign = np.where(_mix(h2) & np.uint64(1), 1.0, -1.0)
        return pos, sign * mag

    def gradient(self, rank, t):
        if t < 1:
            raise InvalidArgument("t starts at 1")
        rng = np.random.default_rng([self.seed, rank, t, 3])
        g = self.noise * rng.standard_normal(self.n) if self.noise else np.zeros(self.n)
        pos, val = self._slots_at(t)
        if self.jitter:
            val = val * (1.0 + self.jitter * rng.standard_normal(val.size))
        np.add.at(g, pos, val)
        return self.scale(t) * g


@lru_cache(maxsize=8)
def _process(n, seed):
    return DriftingProcess(n, seed)


def drifting_gradient_process(t, seed, n, rank=0):
    """Gradient at iteration ``t`` of the default drifting process."""
    return _process(n, seed).gradient(rank, t)


class TightCase:
    """Inputs meeting the lower bound on steady-state traffic.

    On refresh iterations every rank emits ones on the same k evenly spaced
    coordinates, which fixes equal-width regions and thresholds 1 (local) and
    P (global). On other iterations rank i places all k of its values in
    region i: k/P large ones (4P) that form the global top-k and k - k/P
    medium ones (1.5) that pass only the local threshold.
    """

    def __init__(self, n, k, P, tau, tau_prime):
        if k % P or n % k or (n // P) < k:
            raise InvalidArgument("need P | k, k | n and n/P >= k")
        self.n, self.k, self.P, self.tau, self.tau_prime = n, k, P, tau, tau_prime

    def is_refresh(self, t):
        return (t - 1) % self.tau == 0 or (t - 1) % self.tau_prime == 0

    def gradient(self, rank, t):
        g = np.zeros(self.n)
        if self.is_refresh(t):
            g[np.arange(self.k) * (self.n // self.k)] = 1.0
            return g
        width = self.n // self.P
        pos = rank * width + np.arange(self.k) * (width // self.k)
        g[pos] = 1.5
        g[pos[: self.k // self.P]] = 4.0 * self.P
        return g


# ------------------------------------------------------------------ steps

def _checked_gradient(problem, w, rank, t):
    grad = np.asarray(problem.gradient(w, rank, t), dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"rank {rank}: non-finite gradient at t={t}")
    return grad


def oktopk_sgd_step(ctx, state: ModelState, residual: Residual, problem, k, ok: OkState, hook=None):
    """acc = eps + lr*G; sparse allreduce; zero eps on contributing indexes; w -= u/P."""
    t = state.t + 1
    grad = _checked_gradient(problem, state.w, ctx.rank, t)
    acc = residual.eps + state.lr_at(t) * grad
    if hook is not None:
        hook(acc, grad)
    u, idx = ok_sparse_allreduce(ctx, ok, acc, t, k)
    eps = acc.copy()
    eps[idx] = 0.0
    residual.eps = eps
    w = state.w.copy()
    w[u.indices] -= u.values / ctx.size
    return ModelState(w, t, state.lr, state.decay)


def dense_sgd_step(ctx, state: ModelState, problem):
    """w -= (sum over ranks of lr*G) / P via the dense allreduce."""
    t = state.t + 1
    grad = _checked_gradient(problem, state.w, ctx.rank, t)
    total = dense_allreduce(ctx, state.lr_at(t) * grad)
    return ModelState(state.w - total / ctx.size, t, state.lr, state.decay)


def xi_sample(accs, grads, lr, k):
    """Distance between the ideal and the composed top-k update, over |lr * mean G|."""
    P = len(accs)
    mean_acc = np.sum(accs, axis=0) / P
    mean_g = np.sum(grads, axis=0) / P
    denom = float(np.linalg.norm(lr * mean_g))
    if denom == 0.0:
        raise UndefinedRatio("true gradient is zero")
    ideal, _ = topk_exact(mean_acc, k)
    composed = np.zeros_like(mean_acc)
    for a in accs:
        s, _ = topk_exact(a, k)
        composed[s.indices] += s.values
    approx, _ = topk_exact(composed / P, k)
    return float(np.linalg.norm(ideal.to_dense() - approx.to_dense())) / denom


class XiCollector:
    """Central out-of-band collector; its traffic never touches the ledger."""

    def __init__(self, P):
        self.P = P
        self._barrier = threading.Barrier(P)
        self._accs = [None] * P
        self._grads = [None] * P
        self.value = None

    def measure(self, rank, acc, grad, lr, k):
        self._accs[rank], self._grads[rank] = acc.copy(), grad.copy()
        if self._barrier.wait() == 0:
            try:
                self.value = xi_sample(self._accs, self._grads, lr, k)
            except Exception:
                self._barrier.abort()  # release the peers instead of hanging them
                raise
        self._barrier.wait()
        return self.value


def measure_xi(ctx, collector: XiCollector, acc, grad, lr, k):
    """Collective: every rank gets the same xi sample for this iteration."""
    return collector.measure(ctx.rank, acc, grad, lr, k)
