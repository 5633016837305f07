"""Alpha-beta cost predictions for the six allreduce schemes."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidArgument

ALGORITHMS = ("dense", "topka", "topkdsa", "gtopk", "gaussiank", "oktopk")


@dataclass(frozen=True)
class CostModelParams:
    alpha: float = 1.0  # seconds per message
    beta: float = 1.0  # seconds per word

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise InvalidArgument("alpha and beta must be positive")


@dataclass(frozen=True)
class CostPrediction:
    """(low, high) pairs; single-valued rows have low == high."""

    messages: tuple[float, float]
    words: tuple[float, float]
    latency: tuple[float, float]
    bandwidth: tuple[float, float]
    total: tuple[float, float]


def predicted_volume(alg, n, k, P):
    """(messages, words) per rank as (low, high) intervals."""
    lg = math.log2(P) if P > 1 else 0.0
    f = (P - 1) / P
    table = {
        "dense": ((2 * lg,) * 2, (2 * n * f,) * 2),
        "topka": ((lg,) * 2, (2 * k * (P - 1),) * 2),
        "topkdsa": ((P + 2 * lg,) * 2, (4 * k * f, (2 * k + n) * f)),
        "gtopk": ((2 * lg,) * 2, (4 * k * lg,) * 2),
        "gaussiank": ((2 * lg,) * 2, (2 * k * (P - 1),) * 2),
        "oktopk": ((2 * P + 2 * lg,) * 2, (2 * k * f, 6 * k * f)),
    }
    if alg not in table:
        raise InvalidArgument(f"unknown algorithm {alg!r}; expected one of {ALGORITHMS}")
    return table[alg]


def cost_predict(alg, n, k, P, params=CostModelParams()) -> CostPrediction:
    (m0, m1), (w0, w1) = predicted_volume(alg, n, k, P)
    lat = (m0 * params.alpha, m1 * params.alpha)
    bw = (w0 * params.beta, w1 * params.beta)
    return CostPrediction((m0, m1), (w0, w1), lat, bw, (lat[0] + bw[0], lat[1] + bw[1]))
