"""Episode sampling: Dirichlet-imbalanced query sets over synthetic or banked features."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class EpisodeError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class BankFormatError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeSpec:
    n_ways: int = 5
    k_shots: int = 1
    m_queries: int = 75
    # scalar, length-N sequence, or None for the balanced protocol
    dirichlet_alpha: float | tuple[float, ...] | None = 2.0
    feature_dim: int = 64
    min_per_class: int = 0

    def __post_init__(self):
        if self.n_ways < 2:
            raise ConfigurationError("n_ways must be >= 2")
        if self.k_shots < 1:
            raise ConfigurationError("k_shots must be >= 1")
        if self.m_queries < 1:
            raise ConfigurationError("m_queries must be >= 1")
        if self.dirichlet_alpha is None:
            if self.m_queries % self.n_ways:
                raise ConfigurationError("balanced episodes need m_queries divisible by n_ways")
        elif np.any(np.asarray(self.dirichlet_alpha, dtype=float) <= 0):
            raise ConfigurationError("dirichlet_alpha must be positive")
        if self.min_per_class * self.n_ways > self.m_queries:
            raise ConfigurationError("min_per_class * n_ways exceeds m_queries")

    def alpha_vector(self) -> np.ndarray:
        a = np.asarray(self.dirichlet_alpha, dtype=float)
        if a.ndim == 0:
            return np.full(self.n_ways, float(a))
        if a.shape != (self.n_ways,):
            raise ConfigurationError(f"dirichlet_alpha needs {self.n_ways} entries, got {a.shape[0]}")
        return a


@dataclass(frozen=True)
class SyntheticConfig:
    dim: int = 64
    class_separation: float = 4.0
    within_std: float = 1.0

    def __post_init__(self):
        if self.class_separation <= 0:
            raise ConfigurationError("class_separation must be positive")
        if self.within_std <= 0:
            raise ConfigurationError("within_std must be positive")


@dataclass
class Episode:
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    class_counts: np.ndarray
    # bookkeeping for audits; not used by the solvers
    class_means: np.ndarray | None = None
    support_index: list[np.ndarray] | None = None
    query_index: list[np.ndarray] | None = None
    class_ids: list | None = field(default=None)

    @property
    def n_ways(self) -> int:
        return len(self.class_counts)

    @property
    def k_shots(self) -> int:
        return len(self.support_labels) // self.n_ways

    def validate(self) -> None:
        n = self.n_ways
        if not np.all(np.bincount(self.support_labels, minlength=n) == self.k_shots):
            raise EpisodeError("support labels are not K per class")
        if self.class_counts.sum() != len(self.query_labels):
            raise EpisodeError("class counts do not sum to the number of queries")
        if not np.array_equal(np.bincount(self.query_labels, minlength=n), self.class_counts):
            raise EpisodeError("query label histogram disagrees with class counts")

    def relabel(self, perm: Sequence[int]) -> "Episode":
        """Episode with class ``i`` renamed to ``perm[i]`` (rows kept in place)."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return Episode(
            support=self.support,
            support_labels=perm[self.support_labels],
            query=self.query,
            query_labels=perm[self.query_labels],
            class_counts=self.class_counts[inv],
            class_means=None if self.class_means is None else self.class_means[inv],
        )


def sample_dirichlet(alpha, rng: np.random.Generator) -> np.ndarray:
    """Gamma(alpha_i, 1) draws normalised by their sum."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    if np.any(alpha <= 0):
        raise ValueError("Dirichlet concentration must be positive")
    g = rng.standard_gamma(alpha)
    total = g.sum()
    if total == 0.0:
        # every draw underflowed (tiny alpha): mass goes to one coordinate
        g = np.zeros_like(alpha)
        g[rng.integers(len(alpha))] = 1.0
        total = 1.0
    return g / total


def counts_from_proportions(p, m_queries: int, rng: np.random.Generator) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    p = np.clip(p, 0.0, None)
    return rng.multinomial(m_queries, p / p.sum())


def draw_class_counts(spec: EpisodeSpec, rng: np.random.Generator, max_redraws: int = 1000) -> np.ndarray:
    if spec.dirichlet_alpha is None:
        return np.full(spec.n_ways, spec.m_queries // spec.n_ways, dtype=np.int64)
    alpha = spec.alpha_vector()
    for _ in range(max_redraws):
        counts = counts_from_proportions(sample_dirichlet(alpha, rng), spec.m_queries, rng)
        if counts.min() >= spec.min_per_class:
            return counts
    raise EpisodeError(f"could not draw counts with >= {spec.min_per_class} per class in {max_redraws} tries")


def _simplex_means(n: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """N points with all pairwise distances equal to ``separation``, randomly rotated."""
    if dim < n - 1:
        raise ConfigurationError(f"dim={dim} cannot host {n} equidistant means (needs >= {n - 1})")
    centred = np.eye(n) - 1.0 / n
    # orthonormal basis of the sum-zero subspace gives simplex coordinates in R^{n-1}
    basis, _ = np.linalg.qr(centred[:, : n - 1])
    vertices = centred @ basis * (separation / np.sqrt(2.0))
    rot, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    rot *= np.sign(np.diag(r))
    return vertices @ rot[:, : n - 1].T


def _shuffle_queries(rng, query, labels):
    order = rng.permutation(len(labels))
    return query[order], labels[order], order


def make_synthetic_episode(spec: EpisodeSpec, cfg: SyntheticConfig, rng: np.random.Generator) -> Episode:
    n, k = spec.n_ways, spec.k_shots
    if cfg.dim != spec.feature_dim:
        raise ConfigurationError(f"synthetic dim {cfg.dim} differs from episode feature_dim {spec.feature_dim}")
    means = _simplex_means(n, cfg.dim, cfg.class_separation * cfg.within_std, rng)
    counts = draw_class_counts(spec, rng)
    support_labels = np.repeat(np.arange(n), k)
    support = means[support_labels] + cfg.within_std * rng.standard_normal((n * k, cfg.dim))
    query_labels = np.repeat(np.arange(n), counts)
    query = means[query_labels] + cfg.within_std * rng.standard_normal((len(query_labels), cfg.dim))
    query, query_labels, _ = _shuffle_queries(rng, query, query_labels)
    return Episode(support, support_labels, query, query_labels, counts, class_means=means)


@dataclass
class FeatureBank:
    class_ids: list[int]
    features: dict[int, np.ndarray]

    @property
    def dim(self) -> int:
        return next(iter(self.features.values())).shape[1]

    def __post_init__(self):
        dims = {f.shape[1] for f in self.features.values()}
        if len(dims) > 1:
            raise BankFormatError(f"classes disagree on feature dimension: {sorted(dims)}")


def load_feature_bank(path: str | Path) -> FeatureBank:
    """Read ``class_id,v_0,...,v_{d-1}`` lines (no header) into a bank."""
    rows: dict[int, list[list[float]]] = {}
    width = None
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec:
                continue
            if len(rec) < 2:
                raise BankFormatError(f"line {lineno}: expected class id and at least one value")
            if width is None:
                width = len(rec)
            elif len(rec) != width:
                raise BankFormatError(f"line {lineno}: ragged row with {len(rec) - 1} values, expected {width - 1}")
            try:
                cid = int(rec[0])
                vals = [float(v) for v in rec[1:]]
            except ValueError as exc:
                raise BankFormatError(f"line {lineno}: {exc}") from None
            if cid < 0:
                raise BankFormatError(f"line {lineno}: class id must be non-negative")
            rows.setdefault(cid, []).append(vals)
    if not rows:
        raise BankFormatError(f"{path}: no rows")
    ids = sorted(rows)
    return FeatureBank(ids, {c: np.asarray(rows[c], dtype=float) for c in ids})


def save_feature_bank(bank: FeatureBank, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for c in bank.class_ids:
            for row in bank.features[c]:
                w.writerow([c, *(repr(float(v)) for v in row)])


def make_bank_episode(spec: EpisodeSpec, bank: FeatureBank, rng: np.random.Generator) -> Episode:
    n, k = spec.n_ways, spec.k_shots
    if bank.dim != spec.feature_dim:
        raise ConfigurationError(f"bank features have dim {bank.dim}, episode expects {spec.feature_dim}")
    if len(bank.class_ids) < n:
        raise EpisodeError(f"bank has {len(bank.class_ids)} classes, episode needs {n}")
    chosen = [bank.class_ids[i] for i in rng.choice(len(bank.class_ids), size=n, replace=False)]
    counts = draw_class_counts(spec, rng)
    support, query, q_labels, s_idx, q_idx = [], [], [], [], []
    for i, (cid, c) in enumerate(zip(chosen, counts)):
        feats = bank.features[cid]
        if len(feats) < k + c:
            raise EpisodeError(f"class {cid} has {len(feats)} rows, episode needs {k + c} ({k} support + {c} query)")
        order = rng.permutation(len(feats))
        s_idx.append(order[:k])
        q_idx.append(order[k : k + c])
        support.append(feats[order[:k]])
        query.append(feats[order[k : k + c]])
        q_labels.append(np.full(c, i, dtype=np.int64))
    query_arr = np.concatenate(query)
    labels = np.concatenate(q_labels)
    query_arr, labels, _ = _shuffle_queries(rng, query_arr, labels)
    return Episode(
        support=np.concatenate(support),
        support_labels=np.repeat(np.arange(n), k),
        query=query_arr,
        query_labels=labels,
        class_counts=counts,
        support_index=s_idx,
        query_index=q_idx,
        class_ids=chosen,
    )
