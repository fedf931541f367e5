"""Uniform-prior comparators: nearest prototype and a Sinkhorn refinement loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import NumericalError
from .episodes import Episode
from .solver import EpisodeResult, init_prototypes, predict, refine_prototypes
from .transport import cost_matrix


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SinkhornConfig:
    entropic_reg: float = 0.05
    sinkhorn_iters: int = 200
    refinement_steps: int = 20
    inertia: float = 0.1
    tol: float = 1e-4
    # extra iterations allowed past ``sinkhorn_iters`` before giving up on ``tol``
    max_extension: int = 100

    def __post_init__(self):
        if self.entropic_reg <= 0:
            raise ValueError("entropic_reg must be positive")
        if self.sinkhorn_iters < 1:
            raise ValueError("sinkhorn_iters must be >= 1")


def nearest_prototype(episode: Episode, metric: str = "euclidean") -> np.ndarray:
    protos = init_prototypes(episode).matrix
    kind = {"euclidean": "squared_euclidean", "cosine": "cosine_distance"}[metric]
    cost = cost_matrix(episode.query, protos, kind)
    return np.argmin(cost, axis=1)


def marginal_residual(plan: np.ndarray, row_marginal, col_marginal) -> float:
    """L1 distance of the plan's row and column sums from their targets (larger of the two)."""
    return max(
        float(np.abs(plan.sum(axis=1) - row_marginal).sum()),
        float(np.abs(plan.sum(axis=0) - col_marginal).sum()),
    )


def sinkhorn_plan(cost, row_marginal, col_marginal, cfg: SinkhornConfig = SinkhornConfig()) -> np.ndarray:
    """Entropic OT plan by log-domain alternating scaling.

    Runs up to ``cfg.sinkhorn_iters`` sweeps, stopping early once both
    marginals are within ``cfg.tol`` in L1. If the budget runs out first the
    sweeps continue, up to ``max_extension`` times the budget, and a
    :class:`ConvergenceError` is raised if the tolerance is still not met.
    """
    cost = np.asarray(cost, dtype=float)
    a = np.asarray(row_marginal, dtype=float)
    b = np.asarray(col_marginal, dtype=float)
    log_a, log_b = np.log(a), np.log(b)
    log_k = -cost / cfg.entropic_reg
    f = np.zeros(len(a))
    g = np.zeros(len(b))
    limit = cfg.sinkhorn_iters * cfg.max_extension
    for it in range(1, limit + 1):
        f = log_a - logsumexp(log_k + g[None, :], axis=1)
        g = log_b - logsumexp(log_k + f[:, None], axis=0)
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
            raise NumericalError("Sinkhorn potentials are not finite", where="sinkhorn", step=it)
        # columns are exact after the g update; only rows need checking
        plan = np.exp(log_k + f[:, None] + g[None, :])
        if np.abs(plan.sum(axis=1) - a).sum() <= cfg.tol:
            return plan
    raise ConvergenceError(f"Sinkhorn did not reach tol={cfg.tol} after {limit} iterations")


def run_ot_uniform(episode: Episode, cfg: SinkhornConfig = SinkhornConfig()) -> EpisodeResult:
    """Prototype refinement driven by a uniform-marginal transport plan."""
    query = np.asarray(episode.query, dtype=float)
    m, n = len(query), episode.n_ways
    rows, cols = np.full(m, 1.0 / m), np.full(n, 1.0 / n)
    protos = init_prototypes(episode)
    summaries = []
    for it in range(cfg.refinement_steps):
        cost = cost_matrix(query, protos.matrix)
        plan = sinkhorn_plan(cost, rows, cols, cfg)
        summaries.append({"refinement_step": it, "transport_cost": float(np.sum(cost * plan))})
        protos = refine_prototypes(protos, episode, plan * m, cfg.inertia)
    plan = sinkhorn_plan(cost_matrix(query, protos.matrix), rows, cols, cfg)
    return EpisodeResult(
        predictions=predict(plan),
        prototypes=protos,
        loss_summaries=summaries,
        column_mass=(plan * m).sum(axis=0),
        forward=plan * m,
    )
