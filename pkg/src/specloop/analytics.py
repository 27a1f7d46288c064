"""Closed-form speculative decoding analytics."""

from __future__ import annotations

import math

import numpy as np

from .errors import UsageError


def _check(alpha, gamma, c=0.0):
    if not 0.0 <= alpha <= 1.0:
        raise UsageError(f"alpha must be in [0, 1], got {alpha}")
    if int(gamma) != gamma or gamma < 1:
        raise UsageError(f"gamma must be an integer >= 1, got {gamma}")
    if c < 0:
        raise UsageError(f"cost ratio must be >= 0, got {c}")


def expected_accept_length(alpha: float, gamma: int) -> float:
    """Tokens committed per verification under i.i.d. acceptance: sum of alpha**i, i = 0..gamma."""
    _check(alpha, gamma)
    return math.fsum(alpha ** i for i in range(int(gamma) + 1))


def expected_accept_length_closed(alpha: float, gamma: int) -> float:
    """Geometric-series closed form; only a cross-check, undefined at alpha == 1."""
    _check(alpha, gamma)
    if alpha == 1.0:
        return float(gamma + 1)
    return (1.0 - alpha ** (gamma + 1)) / (1.0 - alpha)


def expected_speedup(alpha: float, gamma: int, c: float) -> float:
    _check(alpha, gamma, c)
    return expected_accept_length(alpha, gamma) / (1.0 + gamma * c)


def aux_memory_bytes(B: int, T: int, T_output: int, d: int, V: int) -> int:
    """Inference-side buffer for BF16 hidden states (3 layers) and output logits."""
    for name, val in (("B", B), ("T", T), ("T_output", T_output), ("d", d), ("V", V)):
        if int(val) != val or val < 0:
            raise UsageError(f"{name} must be a non-negative integer")
    return int(B) * (int(T) * 3 * int(d) * 2 + int(T_output) * int(V) * 2)


def per_request_throughput(T_input: int, T_output: int, elapsed: float) -> float:
    if not elapsed > 0:
        raise UsageError(f"elapsed must be positive, got {elapsed}")
    return (T_input + T_output) / elapsed


def simulate_iid_accept_lengths(alpha: float, gamma: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Monte Carlo accept lengths: 1 + number of leading successes among gamma Bernoulli(alpha)."""
    _check(alpha, gamma)
    hits = rng.random((n, gamma)) < alpha
    leading = np.cumprod(hits, axis=1).sum(axis=1)
    return leading + 1
