"""Command line entry point: ``ctfs eval | sweep | prior-report | protocol``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .baselines import SinkhornConfig
from .episodes import EpisodeSpec, SyntheticConfig, load_feature_bank
from .harness import (
    METHODS,
    RunConfig,
    collect_records,
    evaluate,
    prior_recovery_report,
    run_protocol,
    sweep_alpha,
    write_sweep_csv,
)
from .preprocess import PreprocessConfig
from .solver import PutmConfig
from .transport import EStepConfig

OPTIMIZERS = {"gd": "plain_gradient", "adam-like": "adaptive_moments"}


def _alpha(value: str):
    if value.lower() in ("none", "balanced"):
        return None
    return float(value)


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("episode")
    g.add_argument("--method", choices=METHODS, default="putm")
    g.add_argument("--ways", type=int, default=5)
    g.add_argument("--shots", type=int, default=1)
    g.add_argument("--queries", type=int, default=75)
    g.add_argument("--dirichlet-alpha", type=_alpha, default=2.0, help="positive real, or 'none' for balanced")
    g.add_argument("--min-per-class", type=int, default=0)
    src = g.add_mutually_exclusive_group()
    src.add_argument("--synthetic", action="store_true", help="Gaussian synthetic features (default)")
    src.add_argument("--features", type=Path, help="feature bank CSV: class_id,v_0,...,v_{d-1}")
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--separation", type=float, default=4.0)
    g.add_argument("--within-std", type=float, default=1.0)

    g = p.add_argument_group("preprocessing")
    g.add_argument("--beta", type=float, default=0.5)
    g.add_argument("--transform", choices=("power", "log", "none"), default="power")
    g.add_argument("--center", action="store_true")
    g.add_argument("--no-l2", action="store_true")

    g = p.add_argument_group("solver")
    g.add_argument("--rho", type=float, default=0.2)
    g.add_argument("--inertia", type=float, default=0.1)
    g.add_argument("--em-steps", type=int, default=20)
    g.add_argument("--inner-steps", type=int, default=50)
    g.add_argument("--lr", type=float, default=1e-2)
    g.add_argument("--cost", choices=("sqeuclid", "cosine"), default="sqeuclid")
    g.add_argument("--optimizer", choices=tuple(OPTIMIZERS), default="adam-like")
    g.add_argument("--blend-prediction", action="store_true",
                   help="predict from rho*forward + (1-rho)*backward")
    g.add_argument("--entropic-reg", type=float, default=0.05)
    g.add_argument("--sinkhorn-iters", type=int, default=200)

    g = p.add_argument_group("run")
    g.add_argument("--tasks", type=int, default=3000)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--workers", default="1", help="count or 'auto'; CTFS_WORKERS overrides")
    g.add_argument("--per-task", action="store_true", help="keep per-task accuracies in the report")
    g.add_argument("--timing", action="store_true", help="include wall_time (breaks byte-identical reports)")


def config_from_args(a: argparse.Namespace) -> RunConfig:
    # a feature bank fixes its own width
    dim = load_feature_bank(a.features).dim if a.features else a.dim
    spec = EpisodeSpec(
        n_ways=a.ways, k_shots=a.shots, m_queries=a.queries, dirichlet_alpha=a.dirichlet_alpha,
        feature_dim=dim, min_per_class=a.min_per_class,
    )
    estep = EStepConfig(inner_steps=a.inner_steps, learning_rate=a.lr, rho=a.rho,
                        optimizer_kind=OPTIMIZERS[a.optimizer])
    return RunConfig(
        spec=spec,
        synthetic=None if a.features else SyntheticConfig(dim, a.separation, a.within_std),
        bank_path=str(a.features) if a.features else None,
        preprocess=PreprocessConfig(beta=a.beta, center=a.center, l2_normalize=not a.no_l2, transform=a.transform),
        method=a.method,
        putm=PutmConfig(em_steps=a.em_steps, inertia=a.inertia, estep=estep, cost_kind=a.cost,
                        blend_prediction=a.blend_prediction),
        sinkhorn=SinkhornConfig(entropic_reg=a.entropic_reg, sinkhorn_iters=a.sinkhorn_iters,
                                refinement_steps=a.em_steps, inertia=a.inertia),
        tasks=a.tasks,
        base_seed=a.seed,
        keep_per_task=a.per_task,
    )


def _write(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctfs", description="Transductive few-shot evaluation with conditional transport")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="evaluate one configuration over T tasks")
    _common(p)
    p.add_argument("--out", type=Path, help="report JSON path (stdout if omitted)")

    p = sub.add_parser("sweep", help="evaluate over several Dirichlet concentrations")
    _common(p)
    p.add_argument("--alphas", required=True, help="comma separated, e.g. 1,2,3,4,5,6")
    p.add_argument("--out", type=Path, help="JSON list of reports")
    p.add_argument("--csv", type=Path, default=Path("sweep.csv"))

    p = sub.add_parser("prior-report", help="column mass versus true query counts")
    _common(p)
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--per-episode", action="store_true")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("protocol", help="1/3/5-shot, balanced and imbalanced rows")
    _common(p)
    p.add_argument("--shots-list", default="1,3,5")
    p.add_argument("--out", type=Path)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = config_from_args(args)

    if args.command == "eval":
        report = evaluate(cfg, args.workers)
        _write(report.to_json(args.timing), args.out)
    elif args.command == "sweep":
        alphas = [float(x) for x in args.alphas.split(",") if x.strip()]
        reports = sweep_alpha(cfg, alphas, args.workers)
        write_sweep_csv(reports, args.csv)
        _write(json.dumps([r.to_dict(args.timing) for r in reports], indent=2, sort_keys=True) + "\n", args.out)
    elif args.command == "prior-report":
        records = collect_records(cfg, args.workers)
        summary = prior_recovery_report(records, args.min_count, args.per_episode)
        _write(json.dumps({"method": cfg.method, "prior_recovery": summary}, indent=2, sort_keys=True) + "\n",
               args.out)
    elif args.command == "protocol":
        shots = tuple(int(s) for s in args.shots_list.split(","))
        reports = run_protocol(cfg, shots=shots, workers=args.workers)
        rows = [
            {"shots": r.config["spec"]["k_shots"], "dirichlet_alpha": r.config["spec"]["dirichlet_alpha"],
             "mean_accuracy": r.mean_accuracy, "ci95": r.ci95_halfwidth}
            for r in reports
        ]
        _write(json.dumps(rows, indent=2, sort_keys=True) + "\n", args.out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
