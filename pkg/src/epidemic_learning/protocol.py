"""What one node does in a round: local step, send, aggregate.

A round for node i is::

    half  = local_step(state, grad, gamma)          # x^{t+1/2}
    send ModelMessage(t, i, half) to each out-neighbor
    inbox = apply_indegree_cap(inbox, k, rng)       # optional
    state.model = aggregate(half, inbox)            # x^{t+1}

The synchronous barrier between sending and aggregating belongs to the
simulator.
"""

from __future__ import annotations

import struct
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidParam, NonFinite, RoundMismatch

__all__ = [
    "NodeState",
    "ModelMessage",
    "message_size",
    "local_step",
    "aggregate",
    "apply_indegree_cap",
]

_HEADER = struct.Struct("<qq")


def message_size(d: int) -> int:
    """Bytes of a serialized ModelMessage carrying a d-dimensional model."""
    return _HEADER.size + 8 * d


@dataclass
class NodeState:
    id: int
    model: np.ndarray
    round: int = 0

    def __post_init__(self) -> None:
        self.model = np.asarray(self.model, dtype=float)
        if self.round < 0:
            raise InvalidParam("round must be >= 0")
        if not np.all(np.isfinite(self.model)):
            raise NonFinite(f"node {self.id}: non-finite model", self.round)


@dataclass(frozen=True)
class ModelMessage:
    """A half-step model sent by ``sender`` during ``round``."""

    round: int
    sender: int
    model: np.ndarray

    def to_bytes(self) -> bytes:
        """Canonical layout: int64 round, int64 sender, then float64 model, all little-endian."""
        body = np.asarray(self.model, dtype="<f8").tobytes()
        return _HEADER.pack(self.round, self.sender) + body

    @classmethod
    def from_bytes(cls, payload: bytes) -> "ModelMessage":
        if len(payload) < _HEADER.size or (len(payload) - _HEADER.size) % 8:
            raise ValueError(f"malformed message of {len(payload)} bytes")
        round_, sender = _HEADER.unpack_from(payload)
        model = np.frombuffer(payload, dtype="<f8", offset=_HEADER.size).astype(float)
        return cls(round=round_, sender=sender, model=model)

    @property
    def nbytes(self) -> int:
        return message_size(int(np.size(self.model)))


def local_step(state: NodeState, grad: np.ndarray, gamma: float) -> np.ndarray:
    """Return ``x - gamma * g``; the state itself is left untouched."""
    if gamma < 0:
        raise InvalidParam(f"step size must be >= 0, got {gamma}")
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.model.shape:
        raise DimensionMismatch(f"gradient shape {grad.shape} vs model {state.model.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        half = state.model - gamma * grad
    if not np.all(np.isfinite(half)):
        raise NonFinite(f"node {state.id}: local step overflowed", state.round)
    return half


def aggregate(
    own_half: np.ndarray,
    received: Sequence[ModelMessage],
    round: int | None = None,
) -> np.ndarray:
    """Equal-weight mean of the node's own half-step model and all received ones.

    Messages are summed in sender order, so the result does not depend on
    arrival order. All messages must share one round (``round`` if given).
    """
    own_half = np.asarray(own_half, dtype=float)
    if not received:
        return own_half.copy()
    expected = received[0].round if round is None else round
    total = own_half.copy()
    lo = own_half.copy()
    hi = own_half.copy()
    for msg in sorted(received, key=lambda m: m.sender):
        if msg.round != expected:
            raise RoundMismatch(
                f"message from node {msg.sender} is for round {msg.round}, expected {expected}"
            )
        if np.shape(msg.model) != own_half.shape:
            raise DimensionMismatch(
                f"message from node {msg.sender} has shape {np.shape(msg.model)}, "
                f"expected {own_half.shape}"
            )
        total += msg.model
        np.minimum(lo, msg.model, out=lo)
        np.maximum(hi, msg.model, out=hi)
    # clipping only removes round-off; it keeps the result inside the inputs' hull
    return np.clip(total / (len(received) + 1), lo, hi)


def apply_indegree_cap(
    received: Sequence[ModelMessage], k: int, rng: np.random.Generator
) -> list[ModelMessage]:
    """Keep a uniformly random k-subset of the inbox when it holds more than k."""
    if k < 0:
        raise InvalidParam(f"cap must be >= 0, got {k}")
    if len(received) <= k:
        return list(received)
    keep = np.sort(rng.choice(len(received), size=k, replace=False))
    return [received[j] for j in keep]
