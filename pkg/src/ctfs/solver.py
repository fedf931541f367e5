"""EM solver: navigator fitting (E-step) alternated with closed-form prototype refinement (M-step)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .core import NumericalError, navigator_distance_batch
from .episodes import Episode
from .transport import (
    COST_ALIASES,
    EStepConfig,
    TransportPair,
    cost_matrix,
    optimize_navigator,
    transports,
)

log = logging.getLogger(__name__)

MAX_LR_HALVINGS = 3


@dataclass(frozen=True)
class PrototypeSet:
    matrix: np.ndarray
    generation: int = 0


@dataclass(frozen=True)
class PutmConfig:
    em_steps: int = 20
    inertia: float = 0.1
    estep: EStepConfig = field(default_factory=EStepConfig)
    cost_kind: str = "squared_euclidean"
    # predict from rho*forward + (1-rho)*backward instead of forward alone
    blend_prediction: bool = False

    def __post_init__(self):
        if self.em_steps < 1:
            raise ValueError("em_steps must be >= 1")
        if not 0.0 <= self.inertia <= 1.0:
            raise ValueError("inertia must lie in [0, 1]")
        object.__setattr__(self, "cost_kind", COST_ALIASES.get(self.cost_kind, self.cost_kind))


@dataclass
class EpisodeResult:
    predictions: np.ndarray
    prototypes: PrototypeSet
    loss_summaries: list[dict]
    column_mass: np.ndarray
    forward: np.ndarray | None = None

    def accuracy(self, labels) -> float:
        return float(np.mean(self.predictions == np.asarray(labels)))


def init_prototypes(episode: Episode) -> PrototypeSet:
    n = episode.n_ways
    sums = np.zeros((n, episode.support.shape[1]))
    np.add.at(sums, episode.support_labels, episode.support)
    counts = np.bincount(episode.support_labels, minlength=n)
    return PrototypeSet(sums / counts[:, None], 0)


def closed_form_prototypes(episode: Episode, forward) -> np.ndarray:
    """Support-anchored weighted mean: (sum_r w_ri f_r + sum_j s_ij) / (K_i + sum_r w_ri)."""
    forward = np.asarray(forward, dtype=float)
    n = episode.n_ways
    support_sum = np.zeros((n, episode.support.shape[1]))
    np.add.at(support_sum, episode.support_labels, episode.support)
    k = np.bincount(episode.support_labels, minlength=n).astype(float)
    mass = forward.sum(axis=0)
    return (forward.T @ episode.query + support_sum) / (k + mass)[:, None]


def refine_prototypes(protos: PrototypeSet, episode: Episode, forward, inertia: float) -> PrototypeSet:
    target = closed_form_prototypes(episode, forward)
    new = protos.matrix + inertia * (target - protos.matrix)
    return PrototypeSet(new, protos.generation + 1)


def predict(forward) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. the lowest class on ties
    return np.argmax(np.asarray(forward), axis=1)


def _estep_with_retry(queries, prototypes, cost, cfg: EStepConfig, rng, on_step=None):
    state = rng.bit_generator.state
    for attempt in range(MAX_LR_HALVINGS + 1):
        try:
            return optimize_navigator(queries, prototypes, cost, cfg, rng, on_step=on_step)
        except NumericalError as exc:
            if attempt == MAX_LR_HALVINGS:
                raise
            log.warning("E-step diverged at step %s (%s); retrying with lr=%g", exc.step, exc.where,
                        cfg.learning_rate / 2)
            cfg = replace(cfg, learning_rate=cfg.learning_rate / 2)
            rng.bit_generator.state = state


def run_putm(episode: Episode, cfg: PutmConfig, rng: np.random.Generator, on_estep=None) -> EpisodeResult:
    """Full EM loop for one episode.

    ``on_estep(em_step, inner_step, pair)`` receives the transports at every
    navigator iterate when given.
    """
    query = np.asarray(episode.query, dtype=float)
    protos = init_prototypes(episode)
    summaries = []
    phi = None
    for it in range(cfg.em_steps):
        cost = cost_matrix(query, protos.matrix, cfg.cost_kind)
        hook = None if on_estep is None else (lambda s, p, it=it: on_estep(it, s, p))
        phi, pair, trace = _estep_with_retry(query, protos.matrix, cost, cfg.estep, rng, on_step=hook)
        summaries.append({"em_step": it, "initial_loss": trace[0], "final_loss": trace[-1]})
        protos = refine_prototypes(protos, episode, pair.forward, cfg.inertia)

    final = transports(navigator_distance_batch(phi, query, protos.matrix))
    scores = final.forward
    if cfg.blend_prediction:
        rho = cfg.estep.rho
        scores = rho * final.forward + (1 - rho) * final.backward
    return EpisodeResult(
        predictions=predict(scores),
        prototypes=protos,
        loss_summaries=summaries,
        column_mass=final.forward.sum(axis=0),
        forward=final.forward,
    )
