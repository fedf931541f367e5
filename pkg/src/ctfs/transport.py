"""Conditional-transport machinery: costs, navigators, loss and the E-step."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .core import (
    GradientWorkspace,
    NumericalError,
    ShapeError,
    init_navigator,
)

log = logging.getLogger(__name__)

CostKind = Literal["squared_euclidean", "cosine_distance"]
COST_ALIASES = {"sqeuclid": "squared_euclidean", "cosine": "cosine_distance"}


@dataclass(frozen=True)
class TransportPair:
    forward: np.ndarray  # rows on the class simplex
    backward: np.ndarray  # columns on the query simplex


@dataclass(frozen=True)
class EStepConfig:
    inner_steps: int = 50
    learning_rate: float = 1e-2
    rho: float = 0.2
    optimizer_kind: Literal["plain_gradient", "adaptive_moments"] = "adaptive_moments"
    leaky_slope: float = 0.01
    # compute type of the inner loop; transports are always returned in float64
    dtype: str = "float32"

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.optimizer_kind not in ("plain_gradient", "adaptive_moments"):
            raise ValueError(f"unknown optimizer {self.optimizer_kind!r}")


def cost_matrix(queries, prototypes, kind: str = "squared_euclidean", diagnostics: Counter | None = None) -> np.ndarray:
    """Pairwise cost between query rows and prototype rows, shape (M, N)."""
    kind = COST_ALIASES.get(kind, kind)
    q = np.asarray(queries, dtype=float)
    p = np.asarray(prototypes, dtype=float)
    if q.ndim != 2 or p.ndim != 2 or q.shape[1] != p.shape[1]:
        raise ShapeError(f"incompatible shapes {q.shape} and {p.shape}")
    if kind == "squared_euclidean":
        diff = q[:, None, :] - p[None, :, :]
        return np.einsum("mnd,mnd->mn", diff, diff)
    if kind == "cosine_distance":
        qn = np.linalg.norm(q, axis=1)
        pn = np.linalg.norm(p, axis=1)
        q_zero, p_zero = qn == 0, pn == 0
        if diagnostics is not None and (q_zero.any() or p_zero.any()):
            diagnostics["zero_vector_cosine"] += int(q_zero.sum() + p_zero.sum())
        cos = (q @ p.T) / np.outer(np.where(q_zero, 1.0, qn), np.where(p_zero, 1.0, pn))
        cos[q_zero, :] = 0.0
        cos[:, p_zero] = 0.0
        return np.clip(1.0 - cos, 0.0, 2.0)
    raise ValueError(f"unknown cost kind {kind!r}")


def forward_navigator(distances) -> np.ndarray:
    """Row-wise softmax of negated distances: each query's distribution over classes."""
    d = np.asarray(distances, dtype=float)
    e = np.exp(-(d - d.min(axis=1, keepdims=True)))
    return e / e.sum(axis=1, keepdims=True)


def backward_navigator(distances) -> np.ndarray:
    """Column-wise softmax of negated distances: each class's distribution over queries."""
    d = np.asarray(distances, dtype=float)
    e = np.exp(-(d - d.min(axis=0, keepdims=True)))
    return e / e.sum(axis=0, keepdims=True)


def transports(distances) -> TransportPair:
    return TransportPair(forward_navigator(distances), backward_navigator(distances))


def ct_loss(cost, pair: TransportPair, rho: float, m: int, n: int) -> float:
    cost = np.asarray(cost, dtype=float)
    if cost.shape != pair.forward.shape or cost.shape != pair.backward.shape or cost.shape != (m, n):
        raise ShapeError("cost and transport shapes disagree")
    weights = (rho / m) * pair.forward + ((1.0 - rho) / n) * pair.backward
    return float(np.sum(cost * weights))


class _Adam:
    """Adaptive-moments update on a flat parameter vector."""

    def __init__(self, lr: float, size: int, dtype, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)

    def step(self, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * g
        self.v *= self.b2
        self.v += (1 - self.b2) * (g * g)
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def optimize_navigator(queries, prototypes, cost, cfg: EStepConfig, rng: np.random.Generator,
                       on_step=None):
    """Fit a freshly initialised navigator to the CT loss with prototypes fixed.

    Returns ``(phi, transports, loss_trace)``. The trace holds the loss at
    initialisation followed by the loss after each update, so it has
    ``inner_steps + 1`` entries. ``on_step(step, pair)`` is called with the
    transports at every iterate, for auditing.
    """
    ws = GradientWorkspace(queries, prototypes, dtype=cfg.dtype)
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (ws.m, ws.n):
        raise ShapeError(f"cost shape {cost.shape} does not match ({ws.m}, {ws.n})")
    phi = init_navigator(ws.z.shape[1], rng, leaky_slope=cfg.leaky_slope).astype(ws.dtype)
    theta = phi.flat()
    adam = _Adam(cfg.learning_rate, theta.size, ws.dtype) if cfg.optimizer_kind == "adaptive_moments" else None

    trace: list[float] = []
    for step in range(cfg.inner_steps):
        try:
            loss, grad = ws.loss_and_grad(phi, cost, cfg.rho)
        except NumericalError as exc:
            exc.step = step
            raise
        trace.append(loss)
        if on_step is not None:
            on_step(step, transports(ws.distances(phi)))
        g = grad.flat()
        theta = adam.step(theta, g) if adam is not None else theta - cfg.learning_rate * g
        phi = phi.unflat(theta)

    pair = transports(ws.distances(phi))
    final = ct_loss(cost, pair, cfg.rho, ws.m, ws.n)
    if not np.isfinite(final):
        raise NumericalError("CT loss is not finite", where="loss", step=cfg.inner_steps)
    trace.append(final)
    if on_step is not None:
        on_step(cfg.inner_steps, pair)
    return phi, pair, trace
