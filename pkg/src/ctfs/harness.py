"""Episodic evaluation: seeded tasks, optional process parallelism, aggregation and reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import SinkhornConfig, nearest_prototype, run_ot_uniform
from .episodes import (
    EpisodeSpec,
    FeatureBank,
    SyntheticConfig,
    load_feature_bank,
    make_bank_episode,
    make_synthetic_episode,
)
from .preprocess import PreprocessConfig, adapt_episode
from .solver import PutmConfig, run_putm

log = logging.getLogger(__name__)

METHODS = ("putm", "ot-uniform", "nearest-euclid", "nearest-cosine")
Z95 = 1.96
_MASK64 = (1 << 64) - 1


class TaskError(RuntimeError):
    def __init__(self, index: int, seed: int, cause: BaseException):
        super().__init__(f"task {index} (seed {seed}) failed: {type(cause).__name__}: {cause}")
        self.index, self.seed = index, seed


def mix_seed(base_seed: int, index: int) -> int:
    """64-bit per-task seed; injective in ``index`` for a fixed base.

    An odd-multiplier affine map followed by the splitmix64 finaliser, both
    bijections on 64-bit words.
    """
    x = (base_seed + (index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RunConfig:
    spec: EpisodeSpec = field(default_factory=EpisodeSpec)
    synthetic: SyntheticConfig | None = field(default_factory=SyntheticConfig)
    bank_path: str | None = None
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    method: str = "putm"
    putm: PutmConfig = field(default_factory=PutmConfig)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    tasks: int = 3000
    base_seed: int = 0
    keep_per_task: bool = False

    def __post_init__(self):
        if self.tasks < 1:
            raise ValueError("tasks must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if (self.synthetic is None) == (self.bank_path is None):
            raise ValueError("exactly one of synthetic config or bank path must be given")

    def echo(self) -> dict:
        d = asdict(self)
        if self.method != "putm":
            d.pop("putm")
        if self.method != "ot-uniform":
            d.pop("sinkhorn")
        return d


@dataclass
class TaskRecord:
    index: int
    seed: int
    accuracy: float
    class_counts: list[int]
    column_mass: list[float]


@dataclass
class EvalReport:
    method: str
    tasks: int
    mean_accuracy: float
    ci95_halfwidth: float
    prior_recovery: dict
    config: dict
    per_task_accuracy: list[float] | None = None
    wall_time: float | None = None
    ci_convention: str = "1.96 * sample_std(ddof=1) / sqrt(T)"

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time")
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"


_BANKS: dict[str, FeatureBank] = {}


def _bank(path: str) -> FeatureBank:
    # per-process cache so workers parse the CSV once
    if path not in _BANKS:
        _BANKS[path] = load_feature_bank(path)
    return _BANKS[path]


def run_task(cfg: RunConfig, index: int) -> TaskRecord:
    seed = mix_seed(cfg.base_seed, index)
    try:
        rng = np.random.default_rng(seed)
        if cfg.synthetic is not None:
            episode = make_synthetic_episode(cfg.spec, cfg.synthetic, rng)
        else:
            episode = make_bank_episode(cfg.spec, _bank(cfg.bank_path), rng)
        episode = adapt_episode(episode, cfg.preprocess)
        if cfg.method == "putm":
            res = run_putm(episode, cfg.putm, rng)
            pred, mass = res.predictions, res.column_mass
        elif cfg.method == "ot-uniform":
            res = run_ot_uniform(episode, cfg.sinkhorn)
            pred, mass = res.predictions, res.column_mass
        else:
            pred = nearest_prototype(episode, "euclidean" if cfg.method == "nearest-euclid" else "cosine")
            mass = np.bincount(pred, minlength=episode.n_ways).astype(float)
    except Exception as exc:
        raise TaskError(index, seed, exc) from exc
    return TaskRecord(
        index=index,
        seed=seed,
        accuracy=float(np.mean(pred == episode.query_labels)),
        class_counts=[int(c) for c in episode.class_counts],
        column_mass=[float(v) for v in mass],
    )


def _run_chunk(cfg: RunConfig, indices: list[int]) -> list[TaskRecord]:
    return [run_task(cfg, i) for i in indices]


def resolve_workers(workers: int | str | None) -> int:
    env = os.environ.get("CTFS_WORKERS")
    if env:
        workers = env
    if workers in (None, "auto"):
        return os.cpu_count() or 1
    n = int(workers)
    if n < 1:
        raise ValueError("workers must be >= 1")
    return n


def collect_records(cfg: RunConfig, workers: int | str | None = 1) -> list[TaskRecord]:
    n_workers = resolve_workers(workers)
    indices = list(range(cfg.tasks))
    if n_workers == 1 or cfg.tasks == 1:
        return _run_chunk(cfg, indices)
    chunk = max(1, math.ceil(cfg.tasks / (n_workers * 4)))
    chunks = [indices[i : i + chunk] for i in range(0, cfg.tasks, chunk)]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        parts = list(pool.map(_run_chunk, [cfg] * len(chunks), chunks))
    records = [r for part in parts for r in part]
    records.sort(key=lambda r: r.index)
    return records


def mean_and_ci(accuracies) -> tuple[float, float]:
    acc = np.asarray(accuracies, dtype=float)
    # np.mean sums pairwise; input order is task order, so the result is schedule-independent
    mean = float(np.mean(acc))
    if len(acc) < 2:
        return mean, 0.0
    return mean, float(Z95 * np.std(acc, ddof=1) / math.sqrt(len(acc)))


def prior_recovery_report(records, min_count: int = 5, per_episode: bool = False) -> dict:
    """Compare per-class column mass with the true query counts.

    ``per_class`` aggregates by class index within the episode; the headline
    ``mean_relative_error`` averages |mass - count| / count over every
    (episode, class) with at least ``min_count`` true queries.
    """
    counts = np.array([r.class_counts for r in records], dtype=float)
    mass = np.array([r.column_mass for r in records], dtype=float)
    abs_err = np.abs(mass - counts)
    per_class = [
        {
            "class_index": i,
            "mean_true_count": float(counts[:, i].mean()),
            "mean_column_mass": float(mass[:, i].mean()),
            "mean_abs_error": float(abs_err[:, i].mean()),
        }
        for i in range(counts.shape[1])
    ]
    sel = counts >= min_count
    rel = abs_err[sel] / counts[sel]
    out = {
        "min_count": min_count,
        "mean_abs_error": float(abs_err.mean()),
        "mean_relative_error": float(rel.mean()) if rel.size else None,
        "n_relative_terms": int(rel.size),
        "per_class": per_class,
    }
    if per_episode:
        out["episodes"] = [
            {"index": r.index, "true_counts": r.class_counts, "column_mass": r.column_mass} for r in records
        ]
    return out


def build_report(cfg: RunConfig, records: list[TaskRecord], wall_time: float | None = None,
                 per_episode: bool = False) -> EvalReport:
    accs = [r.accuracy for r in records]
    mean, ci = mean_and_ci(accs)
    return EvalReport(
        method=cfg.method,
        tasks=cfg.tasks,
        mean_accuracy=mean,
        ci95_halfwidth=ci,
        prior_recovery=prior_recovery_report(records, per_episode=per_episode),
        config=cfg.echo(),
        per_task_accuracy=accs if cfg.keep_per_task else None,
        wall_time=wall_time,
    )


def evaluate(cfg: RunConfig, workers: int | str | None = 1, per_episode: bool = False) -> EvalReport:
    t0 = time.perf_counter()
    records = collect_records(cfg, workers)
    return build_report(cfg, records, time.perf_counter() - t0, per_episode=per_episode)


def with_alpha(cfg: RunConfig, alpha) -> RunConfig:
    return replace(cfg, spec=replace(cfg.spec, dirichlet_alpha=alpha))


def sweep_alpha(cfg: RunConfig, alphas, workers: int | str | None = 1) -> list[EvalReport]:
    if not alphas:
        raise ValueError("alphas must be non-empty")
    return [evaluate(with_alpha(cfg, float(a)), workers) for a in alphas]


def write_sweep_csv(reports: list[EvalReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "method", "mean_accuracy", "ci95"])
        for r in reports:
            w.writerow([r.config["spec"]["dirichlet_alpha"], r.method, repr(r.mean_accuracy), repr(r.ci95_halfwidth)])


PROTOCOL_SHOTS = (1, 3, 5)
PROTOCOL_PRIORS = (None, 2.0)


def run_protocol(cfg: RunConfig, shots=PROTOCOL_SHOTS, priors=PROTOCOL_PRIORS,
                 workers: int | str | None = 1) -> list[EvalReport]:
    """Balanced and Dirichlet-imbalanced rows for each shot count."""
    reports = []
    for k in shots:
        for alpha in priors:
            run = replace(cfg, spec=replace(cfg.spec, k_shots=k, dirichlet_alpha=alpha))
            reports.append(evaluate(run, workers))
    return reports
