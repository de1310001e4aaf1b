"""Command-line entry point: generate, train, eval, compare and spectral verbs."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Sequence

import pandas as pd

from .errors import ConfigurationError, DeledaError
from .models import ExperimentConfig, TopologyConfig
from .services.experiments import (
    align_runs,
    compare_runs,
    config_from_pairs,
    evaluate_checkpoint,
    generate_data,
    load_config,
    read_trajectory,
    run_experiment,
    topology_spectrum,
)


logger = logging.getLogger(__name__)


def _parse_overrides(items: Sequence[str]) -> List[tuple[str, str]]:
    pairs = []
    for item in items:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs.append((key, value))
    return pairs


def resolve_config(config_path: str | None, overrides: Sequence[str]) -> ExperimentConfig:
    """Config file (or defaults), then ``--set`` overrides, then the output directory from the environment."""

    base = load_config(config_path) if config_path else ExperimentConfig()
    pairs = _parse_overrides(overrides)
    output_dir = os.getenv("DELEDA_OUTPUT_DIR")
    if output_dir:
        pairs.append(("output_dir", output_dir))
    return config_from_pairs(pairs, base) if pairs else base


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-c", "--config", help="key = value configuration file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one configuration key (dotted for nested sections)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deleda",
        description="Decentralized LDA simulator: gossip-averaged Gibbs online EM on synthetic corpora.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    generate = subparsers.add_parser("generate", help="write ground truth, node corpora and test set")
    _add_config_arguments(generate)
    generate.add_argument("-o", "--out", required=True, help="output directory")

    train = subparsers.add_parser("train", help="run one experiment and write its trajectory CSV")
    _add_config_arguments(train)
    train.add_argument("--resume", help="checkpoint directory to continue from")

    evaluate = subparsers.add_parser("eval", help="evaluate the models stored in a checkpoint")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--test-corpus", required=True)
    evaluate.add_argument("--beta-star", required=True)
    evaluate.add_argument("--alpha", required=True)
    evaluate.add_argument("--particles", type=int, default=20)
    evaluate.add_argument("--seed", type=int, default=0)

    compare = subparsers.add_parser("compare", help="summarize and align trajectory CSVs")
    compare.add_argument("csv", nargs="+")
    compare.add_argument("--factor", type=float, default=2.0, help="threshold factor over the final rel_error")
    compare.add_argument("--align", choices=["iter", "docs_processed"], help="also print runs aligned on this axis")
    compare.add_argument("-o", "--out", help="write the summary table as CSV")

    spectral = subparsers.add_parser("spectral", help="print lambda2 and the spectral gap of a topology")
    spectral.add_argument("--topology", choices=["complete", "watts_strogatz"], default="complete")
    spectral.add_argument("-n", "--nodes", type=int, default=50)
    spectral.add_argument("-k", type=int, default=4)
    spectral.add_argument("-p", type=float, default=0.3)
    spectral.add_argument("--seed", type=int, default=0)
    return parser


def _run_command(args: argparse.Namespace) -> None:
    if args.command == "generate":
        config = resolve_config(args.config, args.overrides)
        root = generate_data(config, args.out)
        print(root)
    elif args.command == "train":
        config = resolve_config(args.config, args.overrides)
        summary = run_experiment(config, resume_from=args.resume)
        print(summary.model_dump_json(indent=2))
    elif args.command == "eval":
        reports = evaluate_checkpoint(
            args.checkpoint,
            args.test_corpus,
            args.beta_star,
            args.alpha,
            particles=args.particles,
            seed=args.seed,
        )
        frame = pd.DataFrame([report.model_dump() for report in reports])
        print(frame.to_string(index_names=False))
    elif args.command == "compare":
        summary = compare_runs(args.csv, factor=args.factor)
        print(summary.to_string(index=False))
        if args.out:
            summary.to_csv(args.out, index=False)
        if args.align:
            frames = {path: read_trajectory(path) for path in args.csv}
            print(align_runs(frames, axis=args.align).to_string())
    elif args.command == "spectral":
        try:
            topology = TopologyConfig(kind=args.topology, k=args.k, p=args.p)
        except ValueError as exc:
            raise ConfigurationError(str(exc).splitlines()[0]) from exc
        response = topology_spectrum(topology, args.nodes, args.seed)
        print(f"{response.topology}: n={response.n} edges={response.n_edges}")
        print(f"lambda2 = {response.lambda2:.12f}")
        print(f"gap     = {response.gap:.12f}")


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=os.getenv("DELEDA_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        _run_command(args)
    except DeledaError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
