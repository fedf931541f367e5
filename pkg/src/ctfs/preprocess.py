"""Channel-wise feature adaptation applied before transductive inference."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .episodes import Episode


@dataclass(frozen=True)
class PreprocessConfig:
    beta: float = 0.5
    epsilon: float = 1e-6
    center: bool = False
    l2_normalize: bool = True
    transform: Literal["power", "log", "none"] = "power"

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.transform not in ("power", "log", "none"):
            raise ValueError(f"unknown transform {self.transform!r}")


def adapt_features(features, cfg: PreprocessConfig, diagnostics: Counter | None = None) -> np.ndarray:
    """Power (or log) transform, optional centring, optional row L2 normalisation.

    Negative inputs are shifted by the global minimum first so the transform
    sees a non-negative base.
    """
    x = np.array(features, dtype=float)
    if cfg.transform != "none":
        lo = x.min() if x.size else 0.0
        if lo < 0:
            x = x - lo
        if cfg.transform == "power":
            x = (x + cfg.epsilon) ** cfg.beta
        else:
            x = np.log1p(x)
    if cfg.center:
        x = x - x.mean(axis=0, keepdims=True)
    if cfg.l2_normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        zero = norms[:, 0] == 0
        if diagnostics is not None and zero.any():
            diagnostics["zero_norm_rows"] += int(zero.sum())
        x = x / np.where(norms == 0, 1.0, norms)
    return x


def adapt_episode(episode: Episode, cfg: PreprocessConfig, diagnostics: Counter | None = None) -> Episode:
    """Adapt support and query jointly so shifts and centring share one statistic."""
    n_s = len(episode.support)
    both = adapt_features(np.vstack([episode.support, episode.query]), cfg, diagnostics)
    return replace(episode, support=both[:n_s], query=both[n_s:])
